"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands or arguments have incompatible shapes."""


class NumericError(ArithmeticError):
    """A computation produced NaN or infinite values."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Invalid dataset contents."""


class FormatError(DataError):
    """Malformed or truncated data file."""
