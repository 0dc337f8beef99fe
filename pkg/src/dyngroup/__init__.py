"""Dynamic latent-group tensor model with filter-based EM estimation."""

from .estimator import FitConfig, FitReport, fit, mse
from .generator import GenConfig, HiddenRecord, ObservationSet, apply_missing_mask, sample_dataset
from .model import InvalidArgumentError, ModelParams

__version__ = "0.1.0"

__all__ = [
    "FitConfig",
    "FitReport",
    "GenConfig",
    "HiddenRecord",
    "InvalidArgumentError",
    "ModelParams",
    "ObservationSet",
    "apply_missing_mask",
    "fit",
    "mse",
    "sample_dataset",
    "__version__",
]
