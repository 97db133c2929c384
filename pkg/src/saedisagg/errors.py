"""Exception types shared across the package."""


class SaedisaggError(Exception):
    """Base class for all package errors."""


class StructuralError(SaedisaggError):
    """Geography or data tables violate a structural invariant."""


class DataError(SaedisaggError):
    """Input data is incomplete or inconsistent with the model."""


class SpecError(SaedisaggError):
    """A model specification violates a validation rule."""

    def __init__(self, message, rule=None):
        super().__init__(message)
        self.rule = rule


class EstimationError(SaedisaggError):
    """A design-based estimator cannot be computed for a cell."""


class BoundaryEstimateError(EstimationError):
    """Direct estimate sits on the boundary of the link domain."""


class NumericError(SaedisaggError):
    """Non-finite intermediate or failed factorization."""


class ConvergenceError(SaedisaggError):
    """An iterative solver failed to converge."""


class MetricUndefinedError(SaedisaggError):
    """An evaluation metric is undefined for the given inputs."""
