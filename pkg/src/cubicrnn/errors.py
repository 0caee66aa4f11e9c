"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Inconsistent shapes, channel counts or configuration values."""


class UsageError(ValueError):
    """An API or command was called in a way its contract forbids."""


class FormatError(ValueError):
    """A file on disk does not match the expected binary layout."""


class NumericGuardError(ArithmeticError):
    """An input lies outside the domain where a loss is finite."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
