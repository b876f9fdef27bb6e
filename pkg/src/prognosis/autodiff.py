"""Dense-tensor core with tape-based reverse-mode automatic differentiation.

Covers exactly the operator set the model needs: 1D valid convolution,
instance/layer normalization, GELU (exact erf form), affine maps, softmax,
batched matmul, and the elementwise/reduction glue to assemble losses.
A central finite-difference oracle is provided for gradient verification.

Forward values are checked for finiteness after every op; reductions use
numpy's deterministic last-axis-first order, so forward and backward are
bit-reproducible for fixed inputs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import PrognosisError

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class ShapeMismatch(PrognosisError):
    """Operand shapes are incompatible for the requested op."""


class NotScalarLoss(PrognosisError):
    """backward() was called on a non-scalar node."""


class NonFiniteValue(PrognosisError):
    """An op produced (or was fed) a NaN or infinity."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus an optional position on the reverse-mode tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue("tensor initialized with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse accumulation from this scalar node through the tape."""
        if self.data.size != 1:
            raise NotScalarLoss(f"loss must be scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if parent.requires_grad or parent._backward is not None:
                        if id(parent) in grads:
                            # out-of-place: backward functions may hand out
                            # views or shared arrays, so += would corrupt
                            # aliased entries
                            grads[id(parent)] = grads[id(parent)] + pg
                        else:
                            grads[id(parent)] = pg

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], list[tuple[Tensor, np.ndarray]]],
) -> Tensor:
    """Wrap an op result, recording it on the tape if grad mode is on."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue("op produced non-finite values")
    tracked = _grad_enabled and any(
        p.requires_grad or p._backward is not None for p in parents
    )
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    if tracked:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"{op}: {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: [(a, g), (b, g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: [(a, g), (b, -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    return _make(
        a.data * b.data, (a, b), lambda g: [(a, g * b.data), (b, g * a.data)]
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: [(a, g * c)])


def add_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=a.data.dtype)
    return _make(a.data + c, (a,), lambda g: [(a, g)])


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteValue("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: [(a, g / a.data)])


def sigmoid(a: Tensor) -> Tensor:
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (a,), lambda g: [(a, g * y * (1.0 - y))])


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    y = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(y, (a,), lambda g: [(a, g * inside)])


def tsum(a: Tensor) -> Tensor:
    return _make(
        np.asarray(np.sum(a.data)),
        (a,),
        lambda g: [(a, np.broadcast_to(g, a.data.shape).copy())],
    )


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(
        np.asarray(np.mean(a.data)),
        (a,),
        lambda g: [(a, np.broadcast_to(g / n, a.data.shape).copy())],
    )


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.data.shape
    return _make(
        a.data.reshape(shape), (a,), lambda g: [(a, g.reshape(orig))]
    )


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(
        np.transpose(a.data, axes), (a,), lambda g: [(a, np.transpose(g, inv))]
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [t.data for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append((t, g[tuple(idx)]))
        return out

    return _make(np.concatenate(parts, axis=axis), tuple(tensors), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def backward(g: np.ndarray):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return [(a, full)]

    return _make(a.data[start:stop].copy(), (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.data.shape} @ {b.data.shape}")

    def backward(g: np.ndarray):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return [(a, ga), (b, gb)]

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the last axis: x @ w + b."""
    d_in, d_out = w.data.shape
    if x.data.shape[-1] != d_in or b.data.shape != (d_out,):
        raise ShapeMismatch(
            f"linear: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}"
        )
    y = np.matmul(x.data, w.data) + b.data

    def backward(g: np.ndarray):
        g2 = g.reshape(-1, d_out)
        x2 = x.data.reshape(-1, d_in)
        return [
            (x, np.matmul(g, w.data.T)),
            (w, x2.T @ g2),
            (b, g2.sum(axis=0)),
        ]

    return _make(y, (x, w, b), backward)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact normal CDF (erf form)."""
    phi_cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    y = x.data * phi_cdf

    def backward(g: np.ndarray):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return [(x, g * (phi_cdf + x.data * pdf))]

    return _make(y, (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Last-axis softmax with max-subtraction for stability."""
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return [(x, y * (g - dot))]

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (1/d variance), then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or shift.data.shape != (d,):
        raise ShapeMismatch(f"layer_norm: x {x.data.shape}, gain {gain.data.shape}")
    mean = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    y = gain.data * xhat + shift.data

    def backward(g: np.ndarray):
        gx = g * gain.data
        dx = inv_std * (
            gx
            - np.mean(gx, axis=-1, keepdims=True)
            - xhat * np.mean(gx * xhat, axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        return [
            (x, dx),
            (gain, np.sum(g * xhat, axis=axes)),
            (shift, np.sum(g, axis=axes)),
        ]

    return _make(y, (x, gain, shift), backward)


def instance_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of a [C, L] signal (1/L variance), then affine."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"instance_norm expects [C, L], got {x.data.shape}")
    c, length = x.data.shape
    if gain.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeMismatch(f"instance_norm: x {x.data.shape}, gain {gain.data.shape}")
    mean = np.mean(x.data, axis=1, keepdims=True)
    var = np.var(x.data, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    y = gain.data[:, None] * xhat + shift.data[:, None]

    def backward(g: np.ndarray):
        gx = g * gain.data[:, None]
        dx = inv_std * (
            gx
            - np.mean(gx, axis=1, keepdims=True)
            - xhat * np.mean(gx * xhat, axis=1, keepdims=True)
        )
        return [
            (x, dx),
            (gain, np.sum(g * xhat, axis=1)),
            (shift, np.sum(g, axis=1)),
        ]

    return _make(y, (x, gain, shift), backward)


def conv1d(x: Tensor, w: Tensor, bias: Tensor, stride: int) -> Tensor:
    """Valid (unpadded) strided 1D cross-correlation.

    x: [C_in, L], w: [C_out, C_in, k], bias: [C_out] -> [C_out, L_out]
    with L_out = (L - k) // stride + 1.
    """
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ShapeMismatch(f"conv1d: x {x.data.shape}, w {w.data.shape}")
    c_in, length = x.data.shape
    c_out, c_in_w, k = w.data.shape
    if c_in != c_in_w or bias.data.shape != (c_out,):
        raise ShapeMismatch(
            f"conv1d: x {x.data.shape}, w {w.data.shape}, bias {bias.data.shape}"
        )
    if k > length:
        raise ShapeMismatch(f"conv1d: kernel {k} longer than input {length}")
    if stride < 1:
        raise ShapeMismatch(f"conv1d: stride must be >= 1, got {stride}")
    l_out = (length - k) // stride + 1
    # im2col: [L_out, C_in * k]
    windows = sliding_window_view(x.data, k, axis=1)[:, ::stride, :]
    col = np.ascontiguousarray(windows.transpose(1, 0, 2)).reshape(l_out, c_in * k)
    w_mat = w.data.reshape(c_out, c_in * k)
    y = (col @ w_mat.T + bias.data).T  # [C_out, L_out]

    def backward(g: np.ndarray):
        g_t = g.T  # [L_out, C_out]
        dw = (g_t.T @ col).reshape(c_out, c_in, k)
        db = g.sum(axis=1)
        dcol = (g_t @ w_mat).reshape(l_out, c_in, k).transpose(1, 0, 2)
        dx = np.zeros_like(x.data)
        for j in range(k):
            dx[:, j : j + stride * l_out : stride] += dcol[:, :, j]
        return [(x, dx), (w, dw), (bias, db)]

    return _make(y, (x, w, bias), backward)


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return out
