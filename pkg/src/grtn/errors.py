"""Exception types shared across the package."""


class GrtnError(Exception):
    """Base class for package errors."""


class ShapeError(GrtnError, ValueError):
    """Tensor dimensions do not match an operation's contract."""


class ConfigError(GrtnError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataError(GrtnError, ValueError):
    """Malformed input data (files, sequences)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(GrtnError, RuntimeError):
    """Non-finite values, divergence, or a failed gradient check."""
