"""Joint classification/regression training.

Loss is unweighted: binary cross-entropy on the poor-outcome probability
plus mean squared error on the CPC regression. Optimization is plain Adam
with bias correction. Sampling follows patient -> hour -> segment, all
uniform; the patient split is stratified by outcome at the patient level.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dsp
from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .eeg_io import GOOD, POOR, PatientMeta, RawRecording
from .errors import PrognosisError
from .model import ModelConfig, count_parameters, forward, forward_tensors, init_params

PROB_CLAMP = 1e-7


class EmptyBatch(PrognosisError):
    pass


class TooFewPatients(PrognosisError):
    pass


class EmptySplit(PrognosisError):
    pass


class SingleClassDataset(PrognosisError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    learning_rate: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iterations: int = 300
    eval_every: int = 25
    split_ratio: float = 0.8
    seed: int = 0
    val_segments_per_patient: int = 4

    def __post_init__(self):
        if not (0 < self.split_ratio < 1):
            raise PrognosisError(f"split_ratio must be in (0,1), got {self.split_ratio}")
        if self.batch_size < 1:
            raise PrognosisError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainingExample:
    segment_data: np.ndarray  # [18, 30000]
    y: int  # 1 = Poor
    x: int  # CPC 1..5
    patient_id: str


@dataclass
class LossBreakdown:
    ce: float
    mse: float

    @property
    def total(self) -> float:
        return self.ce + self.mse


def cross_entropy_loss(probs, labels) -> float:
    """Mean binary cross-entropy; probabilities clamped away from 0 and 1."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.size == 0 or probs.shape != labels.shape:
        raise EmptyBatch(f"bad batch shapes {probs.shape} vs {labels.shape}")
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)))


def mse_loss(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.size == 0 or preds.shape != targets.shape:
        raise EmptyBatch(f"bad batch shapes {preds.shape} vs {targets.shape}")
    return float(np.mean((targets - preds) ** 2))


def total_loss(ce: float, mse: float) -> LossBreakdown:
    return LossBreakdown(ce=ce, mse=mse)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={n: np.zeros_like(p.data) for n, p in params.items()},
            v={n: np.zeros_like(p.data) for n, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> None:
    """One in-place Adam update with bias correction."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ad.ShapeMismatch(
                f"{name}: grad {g.shape} vs param {p.data.shape}"
            )
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data -= (cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(
            p.data.dtype
        )


def split_patients(dataset, ratio: float, seed: int) -> tuple[list[str], list[str]]:
    """Patient-level split, stratified by outcome; returns (train_ids, val_ids)."""
    if len(dataset) < 2:
        raise TooFewPatients(f"need >= 2 patients, got {len(dataset)}")
    rng = np.random.default_rng(seed)
    train_ids: list[str] = []
    val_ids: list[str] = []
    for outcome in (GOOD, POOR):
        ids = sorted(pid for pid, (meta, _) in dataset.items() if meta.outcome == outcome)
        if not ids:
            continue
        rng.shuffle(ids)
        cut = int(round(ratio * len(ids)))
        train_ids.extend(ids[:cut])
        val_ids.extend(ids[cut:])
    return sorted(train_ids), sorted(val_ids)


class SegmentStore:
    """Disk-cached preprocessed segments, memory-mapped on read.

    One .npy per (patient, hour) holding [n_segments, 18, 30000] float32.
    """

    def __init__(self, cache_dir):
        self.cache_dir = Path(cache_dir)
        self._index: dict[str, dict[int, Path]] = {}

    def _path(self, patient_id: str, hour_index: int) -> Path:
        return self.cache_dir / patient_id / f"hour_{hour_index}.npy"

    def add_recording(self, rec: RawRecording) -> None:
        path = self._path(rec.patient_id, rec.hour_index)
        if not path.is_file():
            segments = dsp.preprocess(rec)
            arr = np.stack([s.data for s in segments]).astype(np.float32)
            path.parent.mkdir(parents=True, exist_ok=True)
            np.save(path, arr)
        self._index.setdefault(rec.patient_id, {})[rec.hour_index] = path

    def hours(self, patient_id: str) -> list[int]:
        return sorted(self._index.get(patient_id, {}))

    def segments(self, patient_id: str, hour_index: int) -> np.ndarray:
        return np.load(self._index[patient_id][hour_index], mmap_mode="r")

    def n_segments(self, patient_id: str, hour_index: int) -> int:
        return self.segments(patient_id, hour_index).shape[0]


def build_store(dataset, cache_dir) -> SegmentStore:
    store = SegmentStore(cache_dir)
    for pid in sorted(dataset):
        _, recs = dataset[pid]
        for rec in recs:
            store.add_recording(rec)
    return store


def sample_training_example(
    split_ids: list[str], store: SegmentStore, dataset, rng: np.random.Generator
) -> TrainingExample:
    """Uniform patient -> uniform hour -> uniform segment."""
    if not split_ids:
        raise EmptySplit("no patients in split")
    pid = split_ids[int(rng.integers(len(split_ids)))]
    hours = store.hours(pid)
    if not hours:
        raise EmptySplit(f"patient {pid} has no preprocessed hours")
    hour = hours[int(rng.integers(len(hours)))]
    segs = store.segments(pid, hour)
    idx = int(rng.integers(segs.shape[0]))
    meta = dataset[pid][0]
    return TrainingExample(
        segment_data=np.array(segs[idx], dtype=np.float32),
        y=1 if meta.outcome == POOR else 0,
        x=meta.cpc,
        patient_id=pid,
    )


def batch_loss_tensors(
    params: dict[str, Tensor],
    config: ModelConfig,
    batch: list[TrainingExample],
) -> tuple[Tensor, Tensor, Tensor]:
    """Build (ce, mse, total) as scalar graph nodes for one batch."""
    logits = []
    raws = []
    for ex in batch:
        logit, raw = forward_tensors(params, config, ex.segment_data)
        logits.append(logit)
        raws.append(raw)
    dtype = params["pos"].data.dtype
    y = Tensor(np.array([ex.y for ex in batch], dtype=dtype))
    one_minus_y = Tensor(np.array([1 - ex.y for ex in batch], dtype=dtype))
    x_true = Tensor(np.array([ex.x for ex in batch], dtype=dtype))
    probs = ad.clip(ad.sigmoid(ad.concat(logits)), PROB_CLAMP, 1.0 - PROB_CLAMP)
    comp = Tensor(np.ones(len(batch), dtype=dtype))
    ce = ad.scale(
        ad.tmean(
            ad.add(
                ad.mul(y, ad.log(probs)),
                ad.mul(one_minus_y, ad.log(ad.sub(comp, probs))),
            )
        ),
        -1.0,
    )
    diff = ad.sub(x_true, ad.concat(raws))
    mse = ad.tmean(ad.mul(diff, diff))
    return ce, mse, ad.add(ce, mse)


@dataclass
class ValExample:
    segment_data: np.ndarray
    y: int


def select_validation_segments(
    val_ids: list[str],
    store: SegmentStore,
    dataset,
    seed: int,
    per_patient: int,
) -> list[ValExample]:
    """Fixed, seeded set of validation segments (a few per patient)."""
    rng = np.random.default_rng(seed + 1)
    out: list[ValExample] = []
    for pid in val_ids:
        hours = store.hours(pid)
        if not hours:
            continue
        hour = hours[int(rng.integers(len(hours)))]
        segs = store.segments(pid, hour)
        k = min(per_patient, segs.shape[0])
        picks = rng.choice(segs.shape[0], size=k, replace=False)
        y = 1 if dataset[pid][0].outcome == POOR else 0
        for idx in sorted(int(i) for i in picks):
            out.append(ValExample(np.array(segs[idx], dtype=np.float32), y))
    if not out:
        raise EmptySplit("validation split has no usable segments")
    return out


def validation_accuracy(
    params: dict[str, Tensor], config: ModelConfig, val_examples: list[ValExample]
) -> float:
    correct = 0
    for ex in val_examples:
        out = forward(params, config, ex.segment_data)
        correct += int((out.poor_prob >= 0.5) == (ex.y == 1))
    return correct / len(val_examples)


@dataclass
class TrainResult:
    run_dir: Path
    best_ckpt: Path
    last_ckpt: Path
    metrics_csv: Path
    best_val_accuracy: float
    best_iteration: int
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)


def train(
    dataset,
    store: SegmentStore,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    run_dir,
    dataset_path: str = "",
) -> TrainResult:
    """Full training loop; writes metrics.csv, best.ckpt, last.ckpt, manifest."""
    outcomes = {meta.outcome for meta, _ in dataset.values()}
    if len(outcomes) < 2:
        raise SingleClassDataset(f"dataset contains only {outcomes} patients")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    train_ids, val_ids = split_patients(dataset, train_cfg.split_ratio, train_cfg.seed)
    if not train_ids or not val_ids:
        raise EmptySplit(
            f"split produced {len(train_ids)} train / {len(val_ids)} val patients"
        )
    params = init_params(model_cfg, seed=train_cfg.seed)
    adam = AdamState.fresh(params)
    sampler = np.random.default_rng(train_cfg.seed)
    val_examples = select_validation_segments(
        val_ids, store, dataset, train_cfg.seed, train_cfg.val_segments_per_patient
    )

    started = time.time()
    meta_common = {
        "seed": train_cfg.seed,
        "split_ratio": train_cfg.split_ratio,
        "train_patients": train_ids,
        "val_patients": val_ids,
        "n_parameters": count_parameters(params),
    }
    best_acc = -1.0
    best_iter = 0
    best_snapshot: dict[str, Tensor] | None = None
    rows: list[tuple] = []
    for it in range(1, train_cfg.max_iterations + 1):
        batch = [
            sample_training_example(train_ids, store, dataset, sampler)
            for _ in range(train_cfg.batch_size)
        ]
        ce_t, mse_t, total_t = batch_loss_tensors(params, model_cfg, batch)
        for p in params.values():
            p.zero_grad()
        total_t.backward()
        grads = {n: p.grad for n, p in params.items()}
        adam_step(params, grads, adam, train_cfg)
        val_acc = ""
        if it % train_cfg.eval_every == 0 or it == train_cfg.max_iterations:
            acc = validation_accuracy(params, model_cfg, val_examples)
            val_acc = f"{acc:.6f}"
            if acc > best_acc:
                best_acc = acc
                best_iter = it
                best_snapshot = {
                    n: Tensor(p.data.copy(), requires_grad=True)
                    for n, p in params.items()
                }
        rows.append(
            (it, float(ce_t.data), float(mse_t.data), float(total_t.data), val_acc)
        )

    metrics_csv = run_dir / "metrics.csv"
    with open(metrics_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "ce", "mse", "total", "val_accuracy"])
        for it, ce, mse, tot, acc in rows:
            writer.writerow([it, f"{ce:.6f}", f"{mse:.6f}", f"{tot:.6f}", acc])

    if best_snapshot is None:
        best_snapshot = params
        best_acc = validation_accuracy(params, model_cfg, val_examples)
        best_iter = train_cfg.max_iterations
    best_ckpt = save_checkpoint(
        run_dir / "best.ckpt",
        model_cfg,
        best_snapshot,
        meta={**meta_common, "iteration": best_iter, "val_accuracy": best_acc},
    )
    last_ckpt = save_checkpoint(
        run_dir / "last.ckpt",
        model_cfg,
        params,
        adam_state=adam,
        meta={**meta_common, "iteration": train_cfg.max_iterations},
    )
    manifest = {
        "run_id": run_dir.name,
        "model_config": model_cfg.to_dict(),
        "train_config": {
            "batch_size": train_cfg.batch_size,
            "learning_rate": train_cfg.learning_rate,
            "beta1": train_cfg.beta1,
            "beta2": train_cfg.beta2,
            "eps": train_cfg.eps,
            "max_iterations": train_cfg.max_iterations,
            "eval_every": train_cfg.eval_every,
            "split_ratio": train_cfg.split_ratio,
            "seed": train_cfg.seed,
        },
        "dataset_path": str(dataset_path),
        "version": "eeg-prognosis 0.1.0",
        "started_unix": started,
        "ended_unix": time.time(),
    }
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return TrainResult(
        run_dir=run_dir,
        best_ckpt=best_ckpt,
        last_ckpt=last_ckpt,
        metrics_csv=metrics_csv,
        best_val_accuracy=best_acc,
        best_iteration=best_iter,
        train_ids=train_ids,
        val_ids=val_ids,
    )
