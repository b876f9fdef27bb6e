"""Recording storage format, patient metadata, and synthetic corpus generation.

On-disk layout (one directory per patient):

    <root>/<patient_id>/patient.json
    <root>/<patient_id>/hour_<k>.hdr.json
    <root>/<patient_id>/hour_<k>.f32

The header is JSON; the signal file is raw little-endian float32,
channel-major (all samples of electrode 0, then electrode 1, ...).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PrognosisError

SIGNAL_DTYPE = np.dtype("<f4")
FORMAT_DTYPE_TAG = "f32le"

# 10-20 referential electrodes, in canonical order.
STANDARD_ELECTRODES = (
    "Fp1", "Fp2", "F3", "F4", "F7", "F8", "Fz",
    "C3", "C4", "Cz", "T3", "T4", "T5", "T6",
    "P3", "P4", "Pz", "O1", "O2",
)

GOOD = "Good"
POOR = "Poor"


class MissingFile(PrognosisError):
    pass


class MalformedHeader(PrognosisError):
    pass


class SampleCountMismatch(PrognosisError):
    pass


class NonFiniteSample(PrognosisError):
    pass


class IoFailure(PrognosisError):
    pass


class InvalidProfile(PrognosisError):
    pass


class EmptyDataset(PrognosisError):
    pass


@dataclass(eq=False)
class RawRecording:
    """One hour of referential multi-channel EEG."""

    patient_id: str
    hour_index: int
    fs_hz: float
    electrodes: tuple[str, ...]
    samples: np.ndarray  # [n_electrodes, n_samples] microvolts

    def __post_init__(self):
        self.electrodes = tuple(self.electrodes)
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2 or self.samples.shape[0] != len(self.electrodes):
            raise SampleCountMismatch(
                f"samples shape {self.samples.shape} does not match "
                f"{len(self.electrodes)} electrodes"
            )
        if self.fs_hz <= 0:
            raise MalformedHeader(f"fs_hz must be positive, got {self.fs_hz}")
        if self.samples.shape[1] < 1:
            raise SampleCountMismatch("recording has no samples")
        if self.hour_index < 0:
            raise MalformedHeader(f"hour_index must be >= 0, got {self.hour_index}")
        if not np.all(np.isfinite(self.samples)):
            raise NonFiniteSample(f"non-finite samples in {self.patient_id}")


@dataclass(frozen=True)
class PatientMeta:
    patient_id: str
    outcome: str  # GOOD or POOR
    cpc: int  # 1..5
    hospital: str = "synthetic"

    def __post_init__(self):
        if self.outcome not in (GOOD, POOR):
            raise MalformedHeader(f"outcome must be Good or Poor, got {self.outcome!r}")
        if self.cpc not in (1, 2, 3, 4, 5):
            raise MalformedHeader(f"cpc must be in 1..5, got {self.cpc}")
        if (self.outcome == GOOD) != (self.cpc <= 2):
            raise MalformedHeader(
                f"patient {self.patient_id}: outcome {self.outcome} inconsistent "
                f"with cpc {self.cpc}"
            )


@dataclass(frozen=True)
class SynthesisProfile:
    """Parameters for one synthetic patient."""

    outcome: str
    seed: int
    n_hours: int = 1
    fs_hz: float = 250.0
    burst_period_s: float = 6.0
    suppression_amplitude: float = 0.05
    oscillation_band_hz: tuple[float, float] = (8.0, 12.0)
    noise_exponent: float = 1.0

    def __post_init__(self):
        if self.outcome not in (GOOD, POOR):
            raise InvalidProfile(f"outcome must be Good or Poor, got {self.outcome!r}")
        if self.n_hours < 1:
            raise InvalidProfile(f"n_hours must be >= 1, got {self.n_hours}")
        if self.fs_hz <= 70:
            raise InvalidProfile(
                f"fs_hz must exceed 70 so 35 Hz content is representable, "
                f"got {self.fs_hz}"
            )
        lo, hi = self.oscillation_band_hz
        if not (0 < lo < hi < self.fs_hz / 2):
            raise InvalidProfile(f"bad oscillation band {self.oscillation_band_hz}")


def write_recording(rec: RawRecording, directory) -> tuple[Path, Path]:
    """Write header + raw float32 signal; returns (header_path, signal_path)."""
    directory = Path(directory)
    stem = f"hour_{rec.hour_index}"
    header_path = directory / f"{stem}.hdr.json"
    signal_path = directory / f"{stem}.f32"
    header = {
        "patient_id": rec.patient_id,
        "hour_index": rec.hour_index,
        "fs_hz": rec.fs_hz,
        "electrodes": list(rec.electrodes),
        "n_samples": int(rec.samples.shape[1]),
        "signal_file": signal_path.name,
        "dtype": FORMAT_DTYPE_TAG,
    }
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with open(header_path, "w") as fh:
            json.dump(header, fh, indent=1)
        rec.samples.astype(SIGNAL_DTYPE).tofile(signal_path)
    except OSError as exc:
        raise IoFailure(f"cannot write recording to {directory}: {exc}") from exc
    return header_path, signal_path


_HEADER_FIELDS = {
    "patient_id", "hour_index", "fs_hz", "electrodes",
    "n_samples", "signal_file", "dtype",
}


def load_recording(header_path) -> RawRecording:
    header_path = Path(header_path)
    if not header_path.is_file():
        raise MissingFile(f"header not found: {header_path}")
    try:
        with open(header_path) as fh:
            header = json.load(fh)
    except (json.JSONDecodeError, OSError) as exc:
        raise MalformedHeader(f"{header_path}: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeader(f"{header_path}: header is not a JSON object")
    missing = _HEADER_FIELDS - header.keys()
    if missing:
        raise MalformedHeader(f"{header_path}: missing fields {sorted(missing)}")
    unknown = header.keys() - _HEADER_FIELDS
    if unknown:
        raise MalformedHeader(f"{header_path}: unknown fields {sorted(unknown)}")
    if header["dtype"] != FORMAT_DTYPE_TAG:
        raise MalformedHeader(f"{header_path}: unsupported dtype {header['dtype']!r}")
    signal_path = header_path.parent / header["signal_file"]
    if not signal_path.is_file():
        raise MissingFile(f"signal file not found: {signal_path}")
    raw = np.fromfile(signal_path, dtype=SIGNAL_DTYPE)
    n_elec = len(header["electrodes"])
    n_samples = int(header["n_samples"])
    if raw.size != n_elec * n_samples:
        raise SampleCountMismatch(
            f"{signal_path}: expected {n_elec}x{n_samples}="
            f"{n_elec * n_samples} values, found {raw.size}"
        )
    samples = raw.reshape(n_elec, n_samples)
    if not np.all(np.isfinite(samples)):
        raise NonFiniteSample(f"{signal_path}: non-finite sample values")
    return RawRecording(
        patient_id=header["patient_id"],
        hour_index=int(header["hour_index"]),
        fs_hz=float(header["fs_hz"]),
        electrodes=tuple(header["electrodes"]),
        samples=samples,
    )


def write_patient(meta: PatientMeta, recordings, root) -> Path:
    """Write a full patient directory (metadata + all recordings)."""
    pdir = Path(root) / meta.patient_id
    try:
        pdir.mkdir(parents=True, exist_ok=True)
        with open(pdir / "patient.json", "w") as fh:
            json.dump(
                {
                    "patient_id": meta.patient_id,
                    "outcome": meta.outcome,
                    "cpc": meta.cpc,
                    "hospital": meta.hospital,
                },
                fh,
                indent=1,
            )
    except OSError as exc:
        raise IoFailure(f"cannot write patient dir {pdir}: {exc}") from exc
    for rec in recordings:
        write_recording(rec, pdir)
    return pdir


def _pink_noise(
    rng: np.random.Generator, n: int, fs: float, exponent: float
) -> np.ndarray:
    """1/f^exponent (power) noise, unit standard deviation.

    The shaping is floored below 1 Hz so power does not diverge at DC.
    """
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    shaping = np.maximum(freqs, 1.0) ** (-exponent / 2.0)
    shaping[0] = 0.0
    x = np.fft.irfft(spec * shaping, n)
    return x / np.std(x)


def _band_noise(rng: np.random.Generator, n: int, fs: float, lo: float, hi: float) -> np.ndarray:
    """Band-limited noise with all power inside [lo, hi] Hz, unit std."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    return x / np.std(x)


def synthesize_patient(profile: SynthesisProfile) -> tuple[list[RawRecording], PatientMeta]:
    """Generate a labeled synthetic patient; pure function of the profile.

    Good outcome: stationary alpha-range oscillation plus 1/f noise.
    Poor outcome: burst suppression, alternating full-amplitude and
    suppressed phases of ``burst_period_s`` seconds each.
    """
    rng = np.random.default_rng(profile.seed)
    if profile.outcome == GOOD:
        cpc = int(rng.integers(1, 3))
    else:
        cpc = int(rng.integers(3, 6))
    patient_id = f"synth-{profile.outcome.lower()}-{profile.seed:05d}"
    meta = PatientMeta(patient_id=patient_id, outcome=profile.outcome, cpc=cpc)

    n = int(round(3600 * profile.fs_hz))
    recordings = []
    for hour in range(profile.n_hours):
        samples = np.empty((len(STANDARD_ELECTRODES), n), dtype=np.float32)
        for e in range(len(STANDARD_ELECTRODES)):
            if profile.outcome == GOOD:
                lo, hi = profile.oscillation_band_hz
                osc = _band_noise(rng, n, profile.fs_hz, lo, hi)
                noise = _pink_noise(rng, n, profile.fs_hz, profile.noise_exponent)
                x = 30.0 * osc + 10.0 * noise
            else:
                base = _pink_noise(rng, n, profile.fs_hz, profile.noise_exponent)
                t = np.arange(n) / profile.fs_hz
                phase = np.floor(t / profile.burst_period_s).astype(np.int64)
                envelope = np.where(
                    phase % 2 == 0, 1.0, profile.suppression_amplitude
                )
                x = 40.0 * base * envelope
            samples[e] = x.astype(np.float32)
        recordings.append(
            RawRecording(
                patient_id=patient_id,
                hour_index=hour,
                fs_hz=profile.fs_hz,
                electrodes=STANDARD_ELECTRODES,
                samples=samples,
            )
        )
    return recordings, meta


def load_patient(pdir) -> tuple[PatientMeta, list[RawRecording]]:
    pdir = Path(pdir)
    meta_path = pdir / "patient.json"
    if not meta_path.is_file():
        raise MissingFile(f"patient {pdir.name}: no patient.json in {pdir}")
    try:
        with open(meta_path) as fh:
            raw = json.load(fh)
        meta = PatientMeta(
            patient_id=raw["patient_id"],
            outcome=raw["outcome"],
            cpc=int(raw["cpc"]),
            hospital=raw.get("hospital", ""),
        )
    except (json.JSONDecodeError, KeyError) as exc:
        raise MalformedHeader(f"patient {pdir.name}: bad patient.json: {exc}") from exc
    headers = sorted(pdir.glob("*.hdr.json"))
    if not headers:
        raise EmptyDataset(f"patient {pdir.name}: no recordings in {pdir}")
    recs = []
    for hp in headers:
        try:
            recs.append(load_recording(hp))
        except PrognosisError as exc:
            raise type(exc)(f"patient {pdir.name}: {exc}") from exc
    recs.sort(key=lambda r: r.hour_index)
    return meta, recs


def load_dataset(root) -> dict[str, tuple[PatientMeta, list[RawRecording]]]:
    """Load all patients under root, keyed and ordered by patient id."""
    root = Path(root)
    if not root.is_dir():
        raise MissingFile(f"dataset root not found: {root}")
    # hidden directories are not patients (the preprocessing cache lives
    # in one next to the data)
    pdirs = sorted(
        p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")
    )
    dataset = {}
    for pdir in pdirs:
        meta, recs = load_patient(pdir)
        dataset[meta.patient_id] = (meta, recs)
    if not dataset:
        raise EmptyDataset(f"no patients found under {root}")
    return dataset
