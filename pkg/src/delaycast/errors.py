"""Exception types shared across the package.

The CLI maps these onto exit codes: usage/format/configuration problems exit
with 2, runtime/numeric failures with 1.
"""


class DelaycastError(Exception):
    """Base class for all package errors."""


class DimensionError(DelaycastError):
    """Array shapes do not satisfy an operation's contract."""


class ConfigurationError(DelaycastError):
    """A hyperparameter or structural setting is invalid."""


class UsageError(DelaycastError):
    """An API or CLI call violates its calling contract."""


class DataError(DelaycastError):
    """Input data violates an invariant (NaNs, bad ranges, short splits)."""


class DomainError(DelaycastError):
    """A value lies outside the mathematical domain of an operation."""


class FormatError(DelaycastError):
    """A serialized container is malformed. Carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(DelaycastError):
    """A computation produced non-finite values or diverged."""


class CompatibilityError(DelaycastError):
    """A checkpoint does not match the model configuration."""
