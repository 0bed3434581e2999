"""Shared exception types."""


class NumericsError(RuntimeError):
    """A simulation produced non-finite values.

    Carries enough context (step index, location) to reproduce the blow-up.
    """

    def __init__(self, message, step=None, location=None):
        super().__init__(message)
        self.step = step
        self.location = location


class ConfigError(ValueError):
    """A run configuration failed validation."""
