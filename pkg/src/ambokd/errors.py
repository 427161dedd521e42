"""Exception taxonomy shared across the package."""


class AmbokdError(Exception):
    """Base class for all package errors."""


class DimensionError(AmbokdError):
    """Tensor shapes incompatible with the requested operation."""


class ParameterError(AmbokdError):
    """A hyperparameter or argument is outside its legal range."""


class DataError(AmbokdError):
    """Dataset content violates a contract (e.g. label out of range)."""


class StateError(AmbokdError):
    """Operation requires state that has not been established yet."""


class NumericalError(AmbokdError):
    """A non-finite value appeared where finite arithmetic was required."""


class FormatError(AmbokdError):
    """A serialized file is malformed; message names the byte offset."""


class ConfigError(AmbokdError):
    """Run configuration is invalid; message names the offending key."""
