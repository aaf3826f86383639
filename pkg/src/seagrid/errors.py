"""Exception types shared across the package; the CLI maps them to exit codes."""


class SeagridError(Exception):
    """Base class for package errors."""


class DataError(SeagridError):
    """Malformed, missing or inconsistent input data."""


class NumericError(SeagridError, FloatingPointError):
    """Non-finite values appeared during a computation."""
