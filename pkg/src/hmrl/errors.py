"""Shared exception types so callers can tell misconfiguration from misuse."""


class ConfigurationError(ValueError):
    """A constructor/config argument is outside its legal range."""


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class DomainError(ValueError):
    """A value is outside the mathematical domain of an operation."""


class UsageError(RuntimeError):
    """An API was called in an order or mode it does not support."""


class NumericError(ArithmeticError):
    """A numeric input or result is non-finite."""
