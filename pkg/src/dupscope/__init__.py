"""Duplication localization for image pairs via affinity-guided state-space attention."""

from .errors import DupscopeError
from .estimator import DuplicationLocalizer
from .model import ModelConfig, PairModel, load_model, save_model, train
from .tensor import Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "DupscopeError",
    "DuplicationLocalizer",
    "ModelConfig",
    "PairModel",
    "Tensor",
    "grad_check",
    "load_model",
    "save_model",
    "train",
    "__version__",
]
