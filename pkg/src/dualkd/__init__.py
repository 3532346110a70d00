"""Dual-level knowledge distillation for low-complexity acoustic scene classification."""

from .errors import (
    ConfigError,
    DivergenceError,
    DualKDError,
    FormatError,
    IncompatibleError,
    InputError,
    NumericError,
    ShapeError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DivergenceError",
    "DualKDError",
    "FormatError",
    "IncompatibleError",
    "InputError",
    "NumericError",
    "ShapeError",
    "StateError",
    "__version__",
]
