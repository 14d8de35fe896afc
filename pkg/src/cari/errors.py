"""Exception hierarchy shared across the package."""


class CariError(Exception):
    """Base class for all package errors."""


class ShapeError(CariError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CariError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(CariError, ValueError):
    """Invalid configuration. Maps to CLI exit code 2."""


class DataError(CariError, ValueError):
    """Malformed or unusable input data. Maps to CLI exit code 3."""


class BatchSizeError(ContractError):
    """Batch too small for the requested estimator."""


class UndefinedMetricError(CariError, ValueError):
    """Metric is undefined for the given labels (e.g. AUC with one class)."""


class DivergenceError(CariError, ArithmeticError):
    """A loss term became non-finite. Maps to CLI exit code 4.

    The offending per-term values are kept on ``breakdown``.
    """

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown
