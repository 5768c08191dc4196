"""Exception types shared across the package."""


class CnError(Exception):
    """Base class for all package errors."""


class ShapeError(CnError, ValueError):
    """Input array has the wrong shape or width."""


class DegenerateBatchError(CnError, ValueError):
    """Batch too small for batch statistics."""


class DomainError(CnError, ValueError):
    """Argument outside the mathematical domain of a function."""


class NumericError(CnError, ArithmeticError):
    """Non-finite loss or gradient encountered."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class StateError(CnError, RuntimeError):
    """Operation called in the wrong object state."""


class DataError(CnError, ValueError):
    """Dataset is empty, malformed, or inconsistent."""


class ConfigError(CnError, ValueError):
    """Invalid configuration value."""


class CheckpointError(CnError, IOError):
    """Checkpoint file could not be read."""


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass
