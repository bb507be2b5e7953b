"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage/config errors exit 1, data and
format errors exit 2, numeric failures exit 3.
"""


class CompressError(Exception):
    """Base class for all errors raised by nncompress."""


class DimensionError(CompressError, ValueError):
    """Tensor extents do not compose."""


class ParameterError(CompressError, ValueError):
    """An argument is outside its documented domain."""


class StateError(CompressError, RuntimeError):
    """An operation was called in the wrong state (e.g. backward before forward)."""


class NumericError(CompressError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class ConfigError(CompressError, ValueError):
    """An experiment config or CLI argument is invalid."""


class DataError(CompressError):
    """Dataset or cache content is missing or inconsistent."""


class FormatError(DataError):
    """A binary file does not follow its declared layout."""


class TruncatedFileError(DataError, EOFError):
    """A binary file ended before its header said it would."""


class TrainingError(CompressError, RuntimeError):
    """A training hook failed; wraps the original exception with step context."""
