"""Trainable graphs of frozen transformer nodes with a shared latent space."""

from .tensor import Tape, Tensor, backward
from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateInputError,
    DimensionError,
    FrozenGraphError,
    InvalidInputError,
    NumericError,
    StateError,
)

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "FrozenGraphError",
    "DimensionError",
    "InvalidInputError",
    "NumericError",
    "DegenerateInputError",
    "ConfigError",
    "StateError",
    "CheckpointError",
]

__version__ = "0.1.0"
