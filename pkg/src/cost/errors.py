"""Exception hierarchy shared by the whole pipeline.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericError -> 3.
"""


class CostError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(CostError):
    """Caller misuse: bad arguments, invalid configuration, infeasible spec."""


class ConfigError(UsageError):
    """Inconsistent model or layer configuration (e.g. dimension mismatch)."""


class DataError(CostError):
    """Problems with input data or on-disk artifacts."""


class FormatError(DataError):
    """File does not conform to the expected binary/text format."""


class TruncatedError(FormatError):
    """File ends before the payload announced by its header."""


class DuplicateIdError(DataError):
    """An identifier that must be unique appears more than once."""


class NumericError(CostError):
    """Non-finite values or mathematically undefined quantities."""
