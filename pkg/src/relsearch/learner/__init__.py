"""In-repo gradient-boosted tree family behind the seven-entry model menu."""

from .config import (
    BINARY_LOGISTIC,
    BOUNDS,
    MODEL_CHOICES,
    REGRESSION_L1,
    REGRESSION_L2,
    ResolvedConfig,
    resolve_config,
)
from .model import FittedModel, feature_importance, fit, predict
from .objectives import compute_gradients

__all__ = [
    "BINARY_LOGISTIC", "BOUNDS", "MODEL_CHOICES", "REGRESSION_L1", "REGRESSION_L2",
    "ResolvedConfig", "resolve_config", "FittedModel", "feature_importance", "fit", "predict",
    "compute_gradients",
]
