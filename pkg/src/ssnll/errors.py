"""Exception hierarchy shared across the package."""


class SsnllError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SsnllError):
    """Array dimensions are incompatible with the operation."""


class InvalidInputError(SsnllError):
    """An argument violates a documented precondition."""


class InvalidStateError(SsnllError):
    """An object is used outside its valid lifecycle (e.g. a stale cache)."""


class FormatError(SsnllError):
    """A byte stream or file does not match its declared format."""


class UnsupportedError(SsnllError):
    """The format is recognized but the variant is not implemented."""


class ConfigError(SsnllError):
    """An experiment config file is malformed or inconsistent."""
