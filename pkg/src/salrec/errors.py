"""Exception types shared across the package."""


class SalrecError(Exception):
    """Base class for errors raised by this package."""


class DataError(SalrecError):
    """Unusable input data: missing or corrupt files, malformed datasets."""


class ConfigError(SalrecError):
    """Invalid configuration or argument combination."""
