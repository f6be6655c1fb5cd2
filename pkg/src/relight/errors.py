"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class RelightError(Exception):
    """Base class for all package errors."""


class ConfigError(RelightError):
    """Invalid configuration value, flag, or preprocessor spec."""


class DataError(RelightError):
    """Unreadable, malformed, or mismatched input data."""


class NumericError(RelightError):
    """Non-finite values where finite ones are required (e.g. NaN loss)."""


class ShapeError(RelightError):
    """Tensor or image dimension mismatch."""


class GraphError(RelightError):
    """Autograd misuse: backward on a non-scalar or on a consumed graph."""
