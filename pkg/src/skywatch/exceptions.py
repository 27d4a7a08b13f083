"""Exception hierarchy shared by every subsystem."""


class SkywatchError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SkywatchError, ValueError):
    exit_code = 2


class DataError(SkywatchError):
    exit_code = 3


class SchemaError(DataError, ValueError):
    pass


class InsufficientDataError(DataError, ValueError):
    pass


class NumericError(SkywatchError, ArithmeticError):
    exit_code = 4


class DimensionError(SkywatchError, ValueError):
    """Array shapes do not line up."""


class StateError(SkywatchError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class DomainError(SkywatchError, ValueError):
    """A value lies outside its admissible domain (e.g. a malformed action)."""
