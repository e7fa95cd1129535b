"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class FslError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(FslError):
    """Bad invocation: unknown verb, malformed flag, unknown config key."""


class DataError(FslError):
    """Bad input data: missing files, inconsistent corpora, empty classes."""


class NumericalError(FslError):
    """Numerical failure: rank deficiency, factorization failure, non-finite values."""
