"""Exception types shared by every module.

Each class carries a ``category`` used by the command line to pick an exit
code and print a one-line, machine-parsable error.
"""


class SoeNetError(Exception):
    category = "error"
    exit_code = 2


class UsageError(SoeNetError):
    category = "usage"
    exit_code = 1


class ShapeError(SoeNetError, ValueError):
    category = "shape"
    exit_code = 2


class FormatError(SoeNetError):
    """Bad magic, version, truncation or malformed text in a file."""

    category = "format"
    exit_code = 2


class DataError(SoeNetError):
    """Inputs are well formed but cannot satisfy the request."""

    category = "data"
    exit_code = 2


class NonFiniteError(SoeNetError, FloatingPointError):
    category = "numeric"
    exit_code = 3


class ThresholdError(SoeNetError):
    category = "threshold"
    exit_code = 4
