"""Dual-channel thermal-runaway detection for battery test stations."""

__version__ = "0.1.0"

from .errors import (
    DataError,
    DivergedError,
    GraphError,
    ManifestError,
    MissingFileError,
    NumericsError,
    ShapeError,
    SizeMismatchError,
)
from .tensor import Tensor, no_grad

__all__ = [
    "Tensor",
    "no_grad",
    "ShapeError",
    "GraphError",
    "NumericsError",
    "DivergedError",
    "DataError",
    "MissingFileError",
    "ManifestError",
    "SizeMismatchError",
    "__version__",
]
