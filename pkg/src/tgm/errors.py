"""Exception types shared across the package."""


class TgmError(Exception):
    """Base class for library errors."""


class ConfigError(TgmError, ValueError):
    """Inconsistent shapes, dimensions or configuration values."""


class UsageError(TgmError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class FormatError(TgmError, ValueError):
    """A binary file does not follow its declared layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(TgmError, FloatingPointError):
    """A loss or gradient became non-finite."""
