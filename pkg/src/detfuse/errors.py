"""Exception types shared across the toolkit.

DataError maps to CLI exit code 2 (bad input data or configuration),
NumericError to exit code 3 (optimization / numeric failure).
"""


class DataError(ValueError):
    """Invalid input data, file format, or configuration."""


class NumericError(RuntimeError):
    """Numeric failure: non-finite values, degenerate optimization."""
