"""Exception types shared across terlab."""


class TerlabError(Exception):
    """Base class for all terlab errors."""


class ShapeError(TerlabError, ValueError):
    pass


class UsageError(TerlabError, ValueError):
    pass


class ConfigError(TerlabError, ValueError):
    pass


class DataError(TerlabError, ValueError):
    """Malformed or inconsistent dataset content."""


class NumericError(TerlabError, ArithmeticError):
    """A computation produced or would produce a non-finite value."""
