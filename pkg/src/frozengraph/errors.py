"""Exception types shared across the package."""


class FrozenGraphError(Exception):
    """Base class for all package-specific failures."""


class DimensionError(FrozenGraphError):
    """Operand shapes do not conform; the message names both shapes."""


class InvalidInputError(FrozenGraphError):
    """An argument violates an operation's precondition."""


class NumericError(FrozenGraphError):
    """NaN/Inf encountered, or a linear system could not be solved."""


class DegenerateInputError(FrozenGraphError):
    """Input is numerically degenerate (e.g. near-zero vector norm)."""


class ConfigError(FrozenGraphError):
    """A configuration value or file is invalid; the message names the key."""


class StateError(FrozenGraphError):
    """Operation invoked on an object in the wrong lifecycle state."""


class CheckpointError(FrozenGraphError):
    """Checkpoint container is malformed or fails checksum validation."""
