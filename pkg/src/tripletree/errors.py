"""Exception types shared across the package."""


class TraceFormatError(ValueError):
    """Raised when trace data violates the expected format or invariants."""


class ParameterError(ValueError):
    """Raised when a caller-supplied parameter is out of its valid domain."""
