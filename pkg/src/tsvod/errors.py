"""Exception hierarchy shared across the package."""


class TsvodError(Exception):
    """Base class for all package errors."""


class DimensionError(TsvodError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(TsvodError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(TsvodError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(TsvodError, ValueError):
    """Invalid configuration or scene specification."""
