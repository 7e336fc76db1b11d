"""Gated recurrent transformer video denoiser, built on a minimal autograd core."""

from .tensor import Tensor
from .errors import ConfigError, DataError, GrtnError, NumericalError, ShapeError

__all__ = [
    "Tensor",
    "GrtnError",
    "ShapeError",
    "ConfigError",
    "DataError",
    "NumericalError",
]

__version__ = "0.1.0"
