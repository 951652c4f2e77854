"""
Exception hierarchy shared by every module of the package.

Everything raised on purpose derives from :class:`CondNetError`, so callers (and the
command line) can catch a single type.
"""


class CondNetError(Exception):
    """Base class of all errors raised by condnets."""


class ShapeError(CondNetError, ValueError):
    """Operand dimensions do not agree."""


class ConfigurationError(CondNetError, ValueError):
    """A layer, router, policy or training configuration is invalid."""


class ValidationError(CondNetError):
    """An architecture failed static validation (cycles, unknown nodes, shapes)."""


class StateError(CondNetError):
    """An operation was called in the wrong order, e.g. backward before forward."""


class EvaluationError(CondNetError, ArithmeticError):
    """A value that must be finite was NaN or infinite."""


class UnsupportedModeError(CondNetError):
    """The requested operation is not defined for this routing mode or architecture."""


class ArgumentError(CondNetError, ValueError):
    """A function argument is outside its documented domain."""


class DataError(CondNetError):
    """Input data is missing or inconsistent."""


class FormatError(CondNetError):
    """A binary file is truncated or malformed."""

    def __init__(self, message: str, offset: int = -1):
        super().__init__(message if offset < 0 else f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingDivergedError(CondNetError):
    """The training loss became non-finite."""
