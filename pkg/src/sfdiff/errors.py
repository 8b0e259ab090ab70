"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """Raised when an operation receives arguments violating its contract."""


class SampleFormatError(ValueError):
    """Raised when an on-disk sample or dataset is malformed or truncated."""
