"""Exception hierarchy shared by every module."""


class Error(Exception):
    """Base class for all errors raised by flucrel."""


class NonFiniteDerivative(Error):
    """A finite-difference probe produced NaN or Inf."""


class CovarianceNotPSD(Error):
    """The noise covariance d_t(x) could not be factorized."""


class Blowup(Error):
    """A path left the configured guard box (finite-time escape)."""


class SchemePreconditionFailed(Error):
    """A time-inversion scheme was used outside its hypotheses."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InvolutionIncompatible(Error):
    """Langevin matrices do not transform as required under the involution."""


class SingularDiffusion(Error):
    """The diffusion matrix is not invertible where an inverse is needed."""


class MissingNoiseRecord(Error):
    """A functional needs the stored noise increments but none were kept."""


class SamplerUnavailable(Error):
    """No sampler exists for a requested initial density."""


class InsufficientOverlap(Error):
    """Too few histogram bins are populated on both sides of a comparison."""


class DimensionTooLarge(Error):
    """Binned kernel estimates are only supported in low dimension."""


class InsufficientCounts(Error):
    """Histogram cells hold too few samples for a z-score test."""


class DegenerateCocycle(Error):
    """The tangent cocycle became numerically singular."""


class InsufficientSamples(Error):
    """Not enough horizons or samples for a rate-function estimate."""


class UnstableDrift(Error):
    """A drift matrix has an eigenvalue with non-negative real part."""


class SingularGamma(Error):
    """The dissipation matrix Gamma is not invertible."""


class QuadratureFailure(Error):
    """A numerical quadrature did not reach its tolerance."""


class WrongParity(Error):
    """The flux construction needs an odd-degree polynomial potential."""


class BurnInNotConverged(Error):
    """The ensemble failed the stationarity diagnostic after burn-in."""


class ConfigInvalid(Error):
    """An experiment configuration failed validation."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class NonConvexCGF(UserWarning):
    """The empirical cumulant generating function lost convexity."""
