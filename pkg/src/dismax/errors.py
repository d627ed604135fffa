"""Exception hierarchy shared by every module.

Each class maps onto one CLI exit code, see :mod:`dismax.cli`.
"""


class DisMaxError(Exception):
    """Base class for all package errors."""


class ConfigError(DisMaxError, ValueError):
    """Invalid configuration or argument value."""


class ShapeError(DisMaxError, ValueError):
    """Tensor shape or dimension mismatch."""


class DataError(DisMaxError, ValueError):
    """Input data violates an operation's precondition."""


class FormatError(DisMaxError, ValueError):
    """A file on disk does not follow its declared format."""


class NumericError(DisMaxError, ArithmeticError):
    """A computation produced non-finite values."""
