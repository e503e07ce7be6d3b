"""Exception types shared across the package.

The CLI maps each family to a process exit code, so callers should raise the
narrowest class that fits.
"""


class RobustEcgError(Exception):
    """Base class for all package errors."""


class ParameterError(RobustEcgError, ValueError):
    """Invalid hyperparameter, shape or geometry."""


class UsageError(RobustEcgError, ValueError):
    """An API was called in a way its contract forbids."""


class InputError(RobustEcgError, ValueError):
    """Degenerate numeric input (e.g. an all-zero mask row)."""


class IngestionError(RobustEcgError):
    """A record or reference file could not be read."""

    def __init__(self, message: str, record_id: str | None = None):
        super().__init__(message)
        self.record_id = record_id


class NumericError(RobustEcgError, ArithmeticError):
    """A loss or gradient became non-finite during training."""
