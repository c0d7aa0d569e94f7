"""Maximal-update parameterization for diffusion Transformers, at desk scale."""

from .errors import ConfigError, NumericError, ProgramError, SelectionError, ShapeError, UsageError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "NumericError",
    "ProgramError",
    "SelectionError",
    "ShapeError",
    "UsageError",
    "__version__",
]
