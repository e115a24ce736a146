"""Exception types shared across the package."""


class EdumineError(Exception):
    """Base class for all package errors."""


class DataError(EdumineError):
    """Unusable input data or a malformed file."""


class ConfigError(EdumineError, ValueError):
    """A configuration value violates a precondition."""


class ShapeError(EdumineError, ValueError):
    """Operand shapes are incompatible."""


class TrainingError(EdumineError, RuntimeError):
    """An optimization run cannot continue."""
