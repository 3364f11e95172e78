"""Fluid-model simulator and analysis toolkit for multi-path dual congestion control."""

from mpdual.errors import (
    AlmostSaturatedLink,
    AssumptionHViolated,
    DelayGridMismatch,
    NetworkError,
    NonConvergence,
    NonFiniteState,
    PriceDomainViolation,
    ScenarioError,
)
from mpdual.network import (
    AlgorithmParams,
    Link,
    NetworkModel,
    Route,
    Source,
    build_network,
    check_assumption_h,
    demand,
    utility,
    utility_prime,
)

__all__ = [
    "AlgorithmParams",
    "AlmostSaturatedLink",
    "AssumptionHViolated",
    "DelayGridMismatch",
    "Link",
    "NetworkError",
    "NetworkModel",
    "NonConvergence",
    "NonFiniteState",
    "PriceDomainViolation",
    "Route",
    "ScenarioError",
    "Source",
    "build_network",
    "check_assumption_h",
    "demand",
    "utility",
    "utility_prime",
]

__version__ = "0.1.0"
