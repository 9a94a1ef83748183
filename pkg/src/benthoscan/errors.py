"""Exception taxonomy mirrored by the CLI exit codes."""


class DataError(ValueError):
    """Malformed, inconsistent, or mismatched input data (exit code 2)."""


class NumericError(RuntimeError):
    """Numeric failure: divergence, singular matrices, and the like (exit code 3)."""
