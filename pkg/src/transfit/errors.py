"""Exception types shared across the package."""

__all__ = [
    "TransfitError",
    "DataError",
    "FitError",
    "MaxIterationsError",
    "LineSearchError",
    "NonFiniteLikelihoodError",
    "NonConvergenceError",
    "SingularInformationError",
    "BootstrapError",
]


class TransfitError(Exception):
    """Base class for all package errors."""


class DataError(TransfitError):
    """Malformed input data or violated dataset invariants."""


class FitError(TransfitError):
    """Numerical failure during model fitting."""


class MaxIterationsError(FitError):
    """Iteration cap reached; carries the best iterate seen so far."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class LineSearchError(FitError):
    """Objective could not be improved along the search direction."""


class NonFiniteLikelihoodError(FitError):
    """Likelihood became non-finite; parameters are pathological."""


class NonConvergenceError(FitError):
    """Outer loop failed to converge; carries the best iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class SingularInformationError(FitError):
    """Estimated information matrix is numerically singular."""


class BootstrapError(TransfitError):
    """Too many bootstrap refits failed for the band to be trusted."""
