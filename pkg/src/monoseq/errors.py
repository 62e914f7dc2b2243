"""Error taxonomy shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or non-conforming operand shapes."""


class NumericFault(ArithmeticError):
    """A computation produced non-finite values."""


class UsageError(RuntimeError):
    """An API was called in a way its contract forbids."""
