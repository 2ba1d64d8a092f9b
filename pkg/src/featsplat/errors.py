"""Exception types shared across the package, mapped to CLI exit codes."""


class FeatsplatError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FeatsplatError):
    """Invalid configuration, dimensions, or option combination. Exit code 1."""


class DataError(FeatsplatError):
    """Missing or inconsistent dataset contents. Exit code 2."""


class FormatError(DataError):
    """Malformed binary container. Carries the byte offset of the failure."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractViolation(FeatsplatError):
    """A cached record was reused against the wrong forward call."""


class NumericalError(FeatsplatError):
    """Non-finite values encountered where finiteness is required. Exit code 3."""


class DegenerateRotationError(NumericalError):
    """Quaternion norm too small to define a rotation."""
