"""Exception types shared across the package."""


class RelkitError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(RelkitError):
    """Operands or buffers have incompatible shapes."""


class ValidationError(RelkitError):
    """Data violates a documented invariant."""


class ParseError(RelkitError):
    """A file could not be parsed."""


class StateError(RelkitError):
    """An object was used in a way its lifecycle forbids."""


class ConfigError(RelkitError):
    """Bad or incomplete configuration."""


class NonFiniteError(ValidationError):
    """A NaN or Inf appeared where only finite values are allowed."""


class NotFoundError(RelkitError, LookupError):
    """A referenced id, word, or file entry does not exist."""
