"""Desk-scale federated LoRA fine-tuning lab with robust-PCA aggregation."""

from . import aggregation, datasets, diagnostics, federation, linalg, model, rpca
from .errors import ConfigError, NumericError, ParseError

__version__ = "0.1.0"

__all__ = [
    "aggregation",
    "datasets",
    "diagnostics",
    "federation",
    "linalg",
    "model",
    "rpca",
    "ConfigError",
    "NumericError",
    "ParseError",
    "__version__",
]
