"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CapacityExhaustedError(RuntimeError):
    """No free parameters remain for a new task."""


class DatasetError(OSError):
    """Missing or malformed dataset files."""
