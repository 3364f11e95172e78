"""Exception hierarchy shared by all modules."""


class MpdualError(Exception):
    """Base class for every error raised by this package."""


class NetworkError(MpdualError, ValueError):
    """Structural problem with links, routes or sources."""


class PriceDomainViolation(MpdualError, ValueError):
    """Prices left the region ``lambda_r > nu_s > 0`` where the rate laws are defined."""


class NonFiniteState(MpdualError, FloatingPointError):
    """A dynamics step produced NaN or infinity.

    ``t`` carries the simulated time of the failed step when known.
    """

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class DelayGridMismatch(MpdualError, ValueError):
    """A propagation delay is not an integer multiple of the time step."""


class AssumptionHViolated(MpdualError, ValueError):
    """Utility curvature too weak for the chosen exponent (``alpha * p <= 1``)."""


class AlmostSaturatedLink(MpdualError, ValueError):
    """A link has zero price while its load equals its capacity."""


class NonConvergence(MpdualError, RuntimeError):
    """Iterative solver hit its iteration cap.

    ``residual`` is the best KKT residual (or duality gap) reached.
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class ScenarioError(MpdualError, ValueError):
    """Scenario file could not be parsed or validated.

    ``problems`` lists every diagnostic found, one string each.
    """

    def __init__(self, message, problems=()):
        super().__init__(message)
        self.problems = list(problems)
