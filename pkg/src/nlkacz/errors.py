"""Exception types shared across the package."""


class Error(Exception):
    """Base class for all nlkacz errors."""


class IndexOutOfRange(Error):
    """A component/spectrum index lies outside 1..count."""


class DimensionMismatch(Error):
    """Array shapes do not agree with the declared dimensions."""


class GradientVanished(Error):
    """A gradient norm fell below the configured floor.

    Carries ``iteration`` and ``component`` when raised inside a solver loop.
    """

    def __init__(self, message, iteration=None, component=None):
        super().__init__(message)
        self.iteration = iteration
        self.component = component


class ZeroResidual(Error):
    """All residuals are (numerically) zero; the iterate already solves the system."""


class OutOfDomain(Error):
    """A scalar argument lies outside its mathematical domain."""


class HypothesisViolated(Error):
    """The contraction-rate hypothesis gamma*kappa <= theta(1-tau)/(2+theta(1-tau)) fails."""

    def __init__(self, message, gamma_kappa=None, bound=None):
        super().__init__(message)
        self.gamma_kappa = gamma_kappa
        self.bound = bound


class RankDeficient(Error):
    """Matrix does not have full column rank (within tolerance)."""


class SizeCapExceeded(Error):
    """Dense factorization refused: matrix exceeds the configured size cap."""


class NonFinite(Error):
    """An input contains NaN or infinity."""


class EmptyRay(Error):
    """A ray with no pixel intersections was used where support is required."""


class EmptyRaySelected(EmptyRay):
    """The solver selected an equation whose ray has empty support."""


class NotPositive(Error):
    """A matrix that must be entrywise positive has a nonpositive entry."""


class DominanceViolated(Error):
    """Rows of the decomposition matrix do not share strict min/max columns."""


class EmptySupport(Error):
    """A synthesized spectrum has zero weight in every bin."""


class SchemaError(Error):
    """A CSV table has an unexpected header or malformed row."""


class GridError(Error):
    """An energy grid is empty or not strictly increasing."""


class PositivityError(Error):
    """A material table contains a nonpositive attenuation value."""


class InconsistentGeometry(Error):
    """Data, projection, and grid shapes do not refer to the same geometry."""


class MaxEpochs(Error):
    """The epoch budget ran out before the residual tolerance was met."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ZeroTruth(Error):
    """Relative error against an identically-zero truth is undefined."""


class NonPositiveValues(Error):
    """A curve destined for a log-linear fit contains values <= 0."""


class NonPositiveVariance(Error):
    """A constant curve has no variance; the fit R^2 is undefined."""


class RayFailures(Error):
    """One or more per-ray solves failed; carries the failing ray indices."""

    def __init__(self, message, ray_indices=(), causes=()):
        super().__init__(message)
        self.ray_indices = list(ray_indices)
        self.causes = list(causes)


class ConfigError(Error):
    """An experiment configuration is malformed; message names the offending key."""
