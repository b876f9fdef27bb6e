"""Checkpoint container: JSON header + little-endian float32 tensor payloads.

Layout:

    bytes 0..7    magic  b"EEGPCKPT"
    bytes 8..11   format version, uint32 little-endian (currently 1)
    bytes 12..15  header length H, uint32 little-endian
    bytes 16..16+H  UTF-8 JSON header
    remainder     concatenated float32le payloads, in header manifest order

Header JSON: {"config": {...}, "meta": {...}, "tensors": [{"name", "shape"}],
"adam": null | {"t": int, "tensors": [{"name", "shape"}]}}. Adam payloads
(first moment then second moment per entry) follow the parameter payloads.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import PrognosisError
from .model import ModelConfig

MAGIC = b"EEGPCKPT"
VERSION = 1


class CheckpointError(PrognosisError):
    pass


def save_checkpoint(
    path,
    config: ModelConfig,
    params: dict[str, Tensor],
    adam_state=None,
    meta: dict | None = None,
) -> Path:
    path = Path(path)
    names = sorted(params)
    header = {
        "config": config.to_dict(),
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(params[n].data.shape)} for n in names],
        "adam": None
        if adam_state is None
        else {
            "t": adam_state.t,
            "tensors": [{"name": n, "shape": list(params[n].data.shape)} for n in names],
        },
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(params[n].data.astype("<f4").tobytes())
        if adam_state is not None:
            for n in names:
                fh.write(np.asarray(adam_state.m[n]).astype("<f4").tobytes())
                fh.write(np.asarray(adam_state.v[n]).astype("<f4").tobytes())
    return path


def _read_tensor(buf: memoryview, offset: int, shape) -> tuple[np.ndarray, int]:
    n = int(np.prod(shape)) if shape else 1
    nbytes = 4 * n
    if offset + nbytes > len(buf):
        raise CheckpointError("checkpoint truncated")
    arr = np.frombuffer(buf[offset : offset + nbytes], dtype="<f4").reshape(shape)
    return arr.copy(), offset + nbytes


def load_checkpoint(path, dtype=np.float32):
    """Returns (config, params, adam_fields, meta).

    adam_fields is None or (t, m_dict, v_dict).
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if len(raw) < 16 + hlen:
        raise CheckpointError("checkpoint truncated")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from exc
    config = ModelConfig.from_dict(header["config"])
    buf = memoryview(raw)
    offset = 16 + hlen
    params: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        arr, offset = _read_tensor(buf, offset, entry["shape"])
        params[entry["name"]] = Tensor(arr.astype(dtype), requires_grad=True)
    adam_fields = None
    if header.get("adam"):
        m: dict[str, np.ndarray] = {}
        v: dict[str, np.ndarray] = {}
        for entry in header["adam"]["tensors"]:
            m[entry["name"]], offset = _read_tensor(buf, offset, entry["shape"])
            v[entry["name"]], offset = _read_tensor(buf, offset, entry["shape"])
        adam_fields = (int(header["adam"]["t"]), m, v)
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return config, params, adam_fields, header.get("meta", {})
