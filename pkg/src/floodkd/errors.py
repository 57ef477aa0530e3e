"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes (see ``floodkd.cli``).
"""


class FloodKDError(Exception):
    """Base class for all package errors."""


class ConfigError(FloodKDError, ValueError):
    """Invalid configuration value, unknown key or incompatible settings."""


class DataError(FloodKDError):
    """Problem with input data (files, shapes, contents)."""


class FormatError(DataError, ValueError):
    """A file does not follow the expected binary layout."""


class SchemaError(DataError, ValueError):
    """Missing band, mismatched shapes or other structural mismatch."""


class DegenerateInputError(DataError, ValueError):
    """Input is well formed but the requested quantity is undefined for it."""


class ContractError(FloodKDError, RuntimeError):
    """An API contract was broken, e.g. a stale forward trace was reused."""


class DivergenceError(FloodKDError, ArithmeticError):
    """Training produced a non-finite loss."""


class TruncatedFileError(DataError, OSError):
    """A file ended before its declared payload was complete."""
