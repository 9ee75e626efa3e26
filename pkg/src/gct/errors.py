class GctError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(GctError, ValueError):
    """An operation received data that violates its preconditions."""


class ConfigError(GctError, ValueError):
    """A configuration value is out of range or inconsistent."""


class NonFiniteLossError(GctError, RuntimeError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
