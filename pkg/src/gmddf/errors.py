"""Exception types shared across the package."""


class GmddfError(Exception):
    """Base class for all package errors."""


class DimensionMismatchError(GmddfError):
    """Operands have incompatible dimensions."""


class DegenerateCovarianceError(GmddfError):
    """Covariance is not usable: asymmetric, indefinite, or too ill-conditioned."""


class UnnormalizedMixtureError(GmddfError):
    """Operation requires a normalized mixture but weights do not sum to 1."""


class DensityUnderflowError(GmddfError):
    """Density evaluated to zero (or -inf in log space) where a positive value is required."""


class EstimateUnreliableError(GmddfError):
    """Importance-sampling estimate rejected because the effective sample size is too low."""

    def __init__(self, message: str, ess: float):
        super().__init__(message)
        self.ess = ess


class DivergenceError(GmddfError):
    """Iterative optimization left the trust region; carries the iterate trace."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class EmptyResultError(GmddfError):
    """An operation pruned or rejected every component."""


class IncompatibleMethodError(GmddfError):
    """Fusion method cannot be used with the given common-information kind."""
