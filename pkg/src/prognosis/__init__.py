"""EEG neuro-prognostication pipeline.

Preprocessing (band-pass, resample, rescale, bipolar montage, segmentation),
a hybrid per-channel 1D-CNN + attention model with joint classification and
CPC regression, Adam training with patient-stratified splits, and
TPR-at-capped-FPR evaluation.
"""

__version__ = "0.1.0"

from .errors import PrognosisError

__all__ = ["PrognosisError", "__version__"]
