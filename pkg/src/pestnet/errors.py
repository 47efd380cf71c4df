"""Exception hierarchy shared by every pestnet module."""


class PestNetError(Exception):
    """Base class for all library errors."""


class DimensionError(PestNetError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(PestNetError):
    """A documented precondition of an operation was violated."""


class ConfigError(PestNetError, ValueError):
    """An architecture or run configuration is invalid."""


class FormatError(PestNetError, ValueError):
    """A file does not follow the expected on-disk format."""


class ValidationError(PestNetError, ValueError):
    """User-supplied data failed validation."""


class NumericError(PestNetError, ArithmeticError):
    """A computation produced non-finite values."""
