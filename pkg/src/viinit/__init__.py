"""Stereo visual-inertial initialization with rotation-translation decoupling."""

from viinit.errors import (
    ViInitError,
    InvalidArgumentError,
    ConfigError,
    DataError,
    NumericalFailure,
    StageError,
)

__version__ = "0.1.0"

__all__ = [
    "ViInitError",
    "InvalidArgumentError",
    "ConfigError",
    "DataError",
    "NumericalFailure",
    "StageError",
    "__version__",
]
