"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4, anything else -> 1.
"""


class SpecReidError(Exception):
    """Base class for all package errors."""


class ConfigError(SpecReidError):
    """Invalid configuration value or combination."""


class DataError(SpecReidError):
    """Dataset, batch-composition, or checkpoint problem."""


class EvalError(DataError):
    """Evaluation protocol cannot proceed (e.g. no valid gallery match for any query)."""


class NumericError(SpecReidError):
    """Non-finite value encountered in a forward or backward pass."""


class ShapeError(SpecReidError):
    """Tensor shape contract violated."""
