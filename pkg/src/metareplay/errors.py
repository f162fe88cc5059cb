"""Exception hierarchy shared by every module of the package."""


class MetaReplayError(Exception):
    """Base class for all package errors."""


class ShapeError(MetaReplayError, ValueError):
    """Operand shapes are incompatible."""


class ValidationError(MetaReplayError, ValueError):
    """An argument violates a precondition."""


class StateError(MetaReplayError, RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class CorruptionError(MetaReplayError, ValueError):
    """Stored or serialized data is internally inconsistent."""


class CapacityError(MetaReplayError):
    """A bounded container would overflow."""


class TrainingError(MetaReplayError, RuntimeError):
    """Training could not proceed (insufficient data, divergence)."""


class ConfigError(MetaReplayError, ValueError):
    """Two configured components disagree with each other."""
