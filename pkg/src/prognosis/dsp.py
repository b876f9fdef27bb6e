"""Preprocessing pipeline: band-pass filter, resample to 100 Hz, min-max
rescale, bipolar conversion, and 5-minute segmentation.

The pipeline order is fixed: filtering happens at the native rate, then
resampling, then per-electrode min-max rescaling over the whole recording,
then the bipolar montage, then segmentation.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal

from .eeg_io import RawRecording
from .errors import PrognosisError

TARGET_FS_HZ = 100.0
SEGMENT_SAMPLES = 30000  # 5 minutes at 100 Hz
DEFAULT_BAND_HZ = (0.5, 35.0)
DEFAULT_ORDER = 4

MAX_RESAMPLE_DENOMINATOR = 10000


class InvalidBand(PrognosisError):
    pass


class UnstableDesign(PrognosisError):
    pass


class NonFiniteInput(PrognosisError):
    pass


class BadRate(PrognosisError):
    pass


class IrreducibleRatio(PrognosisError):
    pass


class MissingElectrode(PrognosisError):
    pass


class TooShort(PrognosisError):
    pass


@dataclass(frozen=True)
class MontagePair:
    anode: str
    cathode: str


# Longitudinal bipolar ("double banana") montage: 18 pairs over the
# 19 standard 10-20 electrodes.
MONTAGE: tuple[MontagePair, ...] = tuple(
    MontagePair(a, c)
    for a, c in (
        ("Fp1", "F7"), ("F7", "T3"), ("T3", "T5"), ("T5", "O1"),
        ("Fp2", "F8"), ("F8", "T4"), ("T4", "T6"), ("T6", "O2"),
        ("Fp1", "F3"), ("F3", "C3"), ("C3", "P3"), ("P3", "O1"),
        ("Fp2", "F4"), ("F4", "C4"), ("C4", "P4"), ("P4", "O2"),
        ("Fz", "Cz"), ("Cz", "Pz"),
    )
)

N_BIPOLAR_CHANNELS = len(MONTAGE)


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections (b0, b1, b2, a1, a2), a0 normalized to 1."""

    sections: tuple[tuple[float, float, float, float, float], ...]

    def __post_init__(self):
        for b0, b1, b2, a1, a2 in self.sections:
            if not (abs(a2) < 1.0 and abs(a1) < 1.0 + a2):
                raise UnstableDesign(
                    f"section (a1={a1}, a2={a2}) has poles on or outside "
                    "the unit circle"
                )

    def as_sos(self) -> np.ndarray:
        return np.array(
            [(b0, b1, b2, 1.0, a1, a2) for b0, b1, b2, a1, a2 in self.sections]
        )

    def frequency_response(self, freqs_hz, fs_hz: float) -> np.ndarray:
        """Complex response of the cascade at the given frequencies."""
        _, h = signal.sosfreqz(
            self.as_sos(), worN=2.0 * np.pi * np.atleast_1d(freqs_hz) / fs_hz
        )
        return h


@dataclass(eq=False)
class BipolarSegment:
    """One preprocessed 5-minute block: 18 channels x 30000 samples at 100 Hz."""

    patient_id: str
    hour_index: int
    segment_index: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape != (N_BIPOLAR_CHANNELS, SEGMENT_SAMPLES):
            raise TooShort(
                f"segment data must be {N_BIPOLAR_CHANNELS}x{SEGMENT_SAMPLES}, "
                f"got {self.data.shape}"
            )
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteInput("segment contains non-finite values")
        if np.any(self.data < -1.0) or np.any(self.data > 1.0):
            raise NonFiniteInput("segment values outside [-1, 1]")


def design_butterworth_bandpass(
    low_hz: float, high_hz: float, order: int, fs_hz: float
) -> BiquadCascade:
    """Butterworth band-pass as second-order sections via bilinear transform.

    ``order`` is the analog prototype order; the band-pass transform doubles
    it, yielding exactly ``order`` sections.
    """
    if not (0 < low_hz < high_hz < fs_hz / 2):
        raise InvalidBand(
            f"need 0 < low < high < fs/2, got ({low_hz}, {high_hz}) at fs={fs_hz}"
        )
    if order < 2 or order % 2 != 0:
        raise InvalidBand(f"order must be even and >= 2, got {order}")
    sos = signal.butter(
        order, [low_hz, high_hz], btype="bandpass", fs=fs_hz, output="sos"
    )
    sections = tuple(
        (row[0] / row[3], row[1] / row[3], row[2] / row[3], row[4] / row[3], row[5] / row[3])
        for row in sos
    )
    return BiquadCascade(sections)


def filter_signal(cascade: BiquadCascade, x) -> np.ndarray:
    """Causal direct-form-II-transposed filtering, zero initial state."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 1:
        raise NonFiniteInput("empty input")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("non-finite input to filter")
    return signal.sosfilt(cascade.as_sos(), x, axis=-1)


def _resample_ratio(fs_in: float, fs_out: float) -> Fraction:
    ratio = fs_out / fs_in
    frac = Fraction(ratio).limit_denominator(MAX_RESAMPLE_DENOMINATOR)
    if abs(float(frac) - ratio) > 1e-9 * ratio:
        raise IrreducibleRatio(
            f"cannot express {fs_out}/{fs_in} with denominator <= "
            f"{MAX_RESAMPLE_DENOMINATOR}"
        )
    return frac


def resample_filter_taps(up: int, down: int, fs_in: float, fs_out: float) -> np.ndarray:
    """Anti-aliasing FIR for the polyphase resampler.

    Windowed sinc (Hann), 10*max(up, down) + 1 taps, cut-off at
    0.45 * min(fs_in, fs_out), designed at the upsampled rate.
    """
    n_taps = 10 * max(up, down) + 1
    fs_high = up * fs_in
    cutoff = 0.45 * min(fs_in, fs_out)
    fc = cutoff / fs_high  # cycles per sample at the high rate
    n = np.arange(n_taps) - (n_taps - 1) / 2.0
    h = 2.0 * fc * np.sinc(2.0 * fc * n)
    h *= np.hanning(n_taps)
    h /= h.sum()
    return h * up  # compensate upsampling gain


def resample(x, fs_in: float, fs_out: float) -> np.ndarray:
    """Rational-ratio polyphase resampling with windowed-sinc anti-aliasing.

    Output length is round(n_in * fs_out / fs_in); identical rates return
    the input unchanged.
    """
    if fs_in <= 0 or fs_out <= 0:
        raise BadRate(f"rates must be positive, got fs_in={fs_in}, fs_out={fs_out}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise BadRate("need at least 2 samples to resample")
    if fs_in == fs_out:
        return x
    frac = _resample_ratio(fs_in, fs_out)
    up, down = frac.numerator, frac.denominator
    h = resample_filter_taps(up, down, fs_in, fs_out)
    delay = (len(h) - 1) // 2
    n_out = int(round(x.shape[-1] * fs_out / fs_in))
    # Filter at the upsampled rate, then compensate group delay and decimate.
    high = signal.upfirdn(h, x, up=up, down=1, axis=-1)
    y = high[..., delay :: down]
    if y.shape[-1] < n_out:
        pad = n_out - y.shape[-1]
        y = np.concatenate([y, np.zeros(y.shape[:-1] + (pad,))], axis=-1)
    return y[..., :n_out]


def minmax_rescale(x) -> np.ndarray:
    """Map to [0, 1]; a constant signal maps to all zeros."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("non-finite input to minmax_rescale")
    lo = x.min(axis=-1, keepdims=True)
    hi = x.max(axis=-1, keepdims=True)
    span = hi - lo
    out = np.zeros_like(x)
    np.divide(x - lo, span, out=out, where=span > 0)
    return out


def to_bipolar(samples, electrodes, montage=MONTAGE) -> np.ndarray:
    """Row i = anode_i - cathode_i, in montage order."""
    samples = np.asarray(samples)
    index = {name: i for i, name in enumerate(electrodes)}
    for pair in montage:
        for name in (pair.anode, pair.cathode):
            if name not in index:
                raise MissingElectrode(name)
    rows = [samples[index[p.anode]] - samples[index[p.cathode]] for p in montage]
    return np.stack(rows)


def segment(
    bipolar: np.ndarray, patient_id: str, hour_index: int
) -> list[BipolarSegment]:
    """Split into non-overlapping 30000-sample windows; remainder dropped."""
    n = bipolar.shape[-1]
    if n < SEGMENT_SAMPLES:
        raise TooShort(f"need >= {SEGMENT_SAMPLES} samples, got {n}")
    n_segments = n // SEGMENT_SAMPLES
    return [
        BipolarSegment(
            patient_id=patient_id,
            hour_index=hour_index,
            segment_index=i,
            data=bipolar[:, i * SEGMENT_SAMPLES : (i + 1) * SEGMENT_SAMPLES],
        )
        for i in range(n_segments)
    ]


def preprocess(
    rec: RawRecording,
    band_hz: tuple[float, float] = DEFAULT_BAND_HZ,
    order: int = DEFAULT_ORDER,
) -> list[BipolarSegment]:
    """Full pipeline: filter, resample to 100 Hz, rescale, bipolar, segment."""
    cascade = design_butterworth_bandpass(band_hz[0], band_hz[1], order, rec.fs_hz)
    filtered = filter_signal(cascade, rec.samples)
    resampled = resample(filtered, rec.fs_hz, TARGET_FS_HZ)
    rescaled = minmax_rescale(resampled)
    bipolar = to_bipolar(rescaled, rec.electrodes)
    return segment(bipolar, rec.patient_id, rec.hour_index)
