"""Exception types shared across the package.

The CLI maps these onto distinct exit codes (see cli.py), so raising the
right class here is part of the interface contract.
"""


class ChanpredError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ChanpredError):
    """Invalid or inconsistent configuration values."""


class DataFormatError(ChanpredError):
    """Malformed on-disk container (bad magic, truncated payload, ...)."""


class ValidationError(ChanpredError):
    """Runtime contract violated (shape mismatch, delay bound, divergence)."""
