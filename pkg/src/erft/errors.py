"""Exception hierarchy shared by every module."""


class ErftError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ErftError, ValueError):
    """Invalid hyperparameter or configuration value."""


class DimensionError(ErftError, ValueError):
    """Tensor or image shapes are incompatible."""


class GeometryError(ErftError, ValueError):
    """Image sizes do not align with the ratio or the patch grid."""


class FormatError(ErftError, ValueError):
    """A file does not follow the expected binary layout."""


class ValidationError(ErftError, ValueError):
    """Data failed a content check (non-finite samples, duplicate names...)."""


class ContractError(ErftError, RuntimeError):
    """An API precondition on object state was violated."""


class MetricUndefinedError(ErftError, ArithmeticError):
    """A quality index cannot be evaluated on the given data."""
