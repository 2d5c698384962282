"""Bayesian U-Net with dual-scale attention, MC-dropout uncertainty and a
variance-penalized BCE loss, on a small numpy autodiff core."""

from .errors import (
    ConfigError,
    FormatError,
    GeometryError,
    NumericalError,
    ParameterError,
    SchemaError,
    ShapeError,
    TapeError,
    UamsaError,
)
from .rng import Rng
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"
