"""Exception types shared across the package."""


class FecaError(Exception):
    """Base class for all package errors."""


class ShapeError(FecaError, ValueError):
    pass


class ValidationError(FecaError, ValueError):
    pass


class ContractError(FecaError, TypeError):
    pass


class FormatError(FecaError, ValueError):
    pass


class MetricError(FecaError, ValueError):
    """Raised when a metric is requested from an accumulator with no data."""
