"""Price dynamics under propagation delay, gain selection and stability checks.

Link ``j`` sees route rates ``x_r(t - T_rj)``, route ``r`` sees link prices
``mu_j(t - T_jr)``, and a source sees its own rates one round trip late.
The relaxed aggregate ``ybar_s`` becomes a state variable. Delays live on
the time grid: every lag is a whole number of steps, so history lookups are
exact array reads with no interpolation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from mpdual.dual import EPS_PRICE, RateVector, _rates, clamp_source_prices, unit_mode
from mpdual.errors import (AssumptionHViolated, DelayGridMismatch, NonFiniteState,
                           PriceDomainViolation)
from mpdual.network import AlgorithmParams, NetworkModel, Source, utility_prime, utility_second

log = logging.getLogger(__name__)

GRID_TOL = 1e-9
OSCILLATION_FRACTION = 0.25
OSCILLATION_THRESHOLD = 0.10


@dataclass(frozen=True)
class DelayedState:
    mu: np.ndarray
    nu: np.ndarray
    ybar: np.ndarray
    t: float = 0.0
    clamp_events: int = 0


@dataclass(frozen=True)
class DelayGains:
    """Constant gains ``kappa_j`` per link and ``kappa_s``, ``rho_s`` per source."""

    kappa_link: np.ndarray
    kappa_source: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        for name in ("kappa_link", "kappa_source", "rho"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if not (np.all(np.isfinite(v)) and np.all(v > 0)):
                raise ValueError(f"{name} must be strictly positive, got {v}")
            object.__setattr__(self, name, v)

    def scaled(self, link=1.0, source=1.0, rho=1.0) -> "DelayGains":
        return DelayGains(self.kappa_link * link, self.kappa_source * source, self.rho * rho)


def _lags(delays: np.ndarray, dt: float, what: str) -> np.ndarray:
    steps = np.asarray(delays, dtype=float) / dt
    snapped = np.rint(steps)
    bad = np.abs(steps - snapped) > GRID_TOL * np.maximum(1.0, steps)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DelayGridMismatch(f"{what} delay {delays[i]!r} s is not a multiple of dt={dt!r}")
    return snapped.astype(int)


def delay_lags(model: NetworkModel, dt: float) -> dict:
    """Integer step lags for forward, feedback and round-trip delays."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    return {
        "rj": _lags(model.hop_t_rj, dt, "forward"),
        "jr": _lags(model.hop_t_jr, dt, "feedback"),
        "r": _lags(model.round_trip, dt, "round-trip"),
    }


class HistoryBuffer:
    """Ring buffers of past route rates and link prices.

    Slot ``k % depth`` holds the sample for step ``k``. Before any sample is
    written the buffers hold the initial value, which is what lookups at
    negative times return.
    """

    def __init__(self, model: NetworkModel, dt: float, mu0, x0):
        lags = delay_lags(model, dt)
        self.dt = dt
        self.lag_rj, self.lag_jr, self.lag_r = lags["rj"], lags["jr"], lags["r"]
        self.depth = int(max(self.lag_rj.max(initial=0), self.lag_jr.max(initial=0),
                             self.lag_r.max(initial=0))) + 1
        self.hop_route, self.hop_link = model.hop_route, model.hop_link
        self.J, self.R = model.J, model.R
        self.x = np.tile(np.asarray(x0, dtype=float), (self.depth, 1))
        self.mu = np.tile(np.asarray(mu0, dtype=float), (self.depth, 1))
        self.k = 0

    @property
    def horizon(self) -> float:
        return (self.depth - 1) * self.dt

    def push_x(self, x):
        self.x[self.k % self.depth] = x

    def push_mu(self, mu):
        self.mu[self.k % self.depth] = mu

    def advance(self):
        self.k += 1

    def route_prices(self) -> np.ndarray:
        """``lambda_r(t) = sum_{j in r} mu_j(t - T_jr)``."""
        vals = self.mu[(self.k - self.lag_jr) % self.depth, self.hop_link]
        return np.bincount(self.hop_route, weights=vals, minlength=self.R)

    def link_arrivals(self) -> np.ndarray:
        """``sum_{j in r} x_r(t - T_rj)``, the load each link currently sees."""
        vals = self.x[(self.k - self.lag_rj) % self.depth, self.hop_route]
        return np.bincount(self.hop_link, weights=vals, minlength=self.J)

    def returned_rates(self) -> np.ndarray:
        """``x_r(t - T_r)`` per route."""
        return self.x[(self.k - self.lag_r) % self.depth, np.arange(self.R)]


def _algebraic_ybar(model, params, lam, nu):
    g, p = params.gamma, params.p
    d = lam - nu[model.route_source]
    total = model.source_matrix @ (g ** p * d ** (1.0 - p))
    if g < 1.0:
        total = total + (1.0 - g) ** p * nu ** (1.0 - p)
    return (model.weight * total ** (1.0 / (p - 1.0))) ** (1.0 / model.alpha)


def initial_delayed_state(model: NetworkModel, params: AlgorithmParams, mu, nu=None,
                          ybar=None) -> DelayedState:
    """Start from prices ``(mu, nu)``; ``ybar`` defaults to its algebraic value there."""
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (model.J,)).copy()
    lam = model.routing_matrix.T @ mu
    if unit_mode(params):
        nu = np.zeros(model.S)
    elif nu is None:
        nu = 0.5 * model.source_min(lam)
    nu = np.broadcast_to(np.asarray(nu, dtype=float), (model.S,)).copy()
    if ybar is None:
        ybar = _algebraic_ybar(model, params, lam, nu)
    return DelayedState(mu, nu, np.broadcast_to(np.asarray(ybar, dtype=float), (model.S,)).copy())


def new_history(model: NetworkModel, params: AlgorithmParams, state: DelayedState,
                dt: float) -> HistoryBuffer:
    """History consistent with a constant past equal to ``state``."""
    lam = model.routing_matrix.T @ state.mu
    x0 = _rates(model, params.gamma, params.p, lam, _nu(params, state, model), state.ybar).x
    return HistoryBuffer(model, dt, state.mu, x0)


def _nu(params, state, model):
    return np.zeros(model.S) if unit_mode(params) else state.nu


def _advance(model, params, gains, state, history, dt):
    if abs(dt - history.dt) > GRID_TOL * dt:
        raise DelayGridMismatch(f"history was built for dt={history.dt!r}, step uses dt={dt!r}")
    g, p, q = params.gamma, params.p, params.q
    unit = unit_mode(params)
    nu = np.zeros(model.S) if unit else state.nu
    lam = history.route_prices()
    d = lam - nu[model.route_source]
    if d.min() <= 0.5 * EPS_PRICE or (not unit and nu.min() <= 0.5 * EPS_PRICE):
        raise PriceDomainViolation(f"prices outside lambda_r > nu_s > 0 at t={state.t:.6g}")
    rates = _rates(model, g, p, lam, nu, state.ybar)
    history.push_x(rates.x)
    arrivals = history.link_arrivals()
    returned = history.returned_rates()
    returned_sum = model.source_matrix @ returned

    excess = arrivals - model.capacity
    if state.mu.min() <= 0:
        excess = np.where(state.mu > 0, excess, np.maximum(excess, 0.0))
    mu = np.maximum(state.mu + dt * (gains.kappa_link * state.mu / p) * excess, 0.0)
    drive = g * (model.source_matrix @ returned ** (1.0 / q)) + (1.0 - g) * rates.y ** (1.0 / q)
    ybar = state.ybar + dt * (q * gains.rho / p) * (drive - state.ybar ** (1.0 / q))
    if unit:
        nu_new = nu
    else:
        nu_new = nu + dt * (gains.kappa_source * nu / p) * (rates.y - returned_sum)
    t = state.t + dt
    if not np.isfinite(mu.sum() + nu_new.sum() + ybar.sum()):
        raise NonFiniteState(f"non-finite state at t={t:.6g}", t=t)
    if ybar.min() <= 0:
        raise NonFiniteState(f"relaxed aggregate left ybar > 0 at t={t:.6g}", t=t)
    history.advance()
    history.push_mu(mu)
    clamps = 0
    if not unit:
        nu_new, clamps = clamp_source_prices(model, params, history.route_prices(), nu_new)
    return DelayedState(mu, nu_new, ybar, t, state.clamp_events + clamps), rates, arrivals


def step_delayed(model: NetworkModel, params: AlgorithmParams, gains: DelayGains,
                 state: DelayedState, history: HistoryBuffer, dt: float) -> DelayedState:
    """Advance one Euler step and the history buffers with it.

    ``history`` must hold ``mu(t)`` at its current slot (true after
    :func:`new_history` and after every call here). Source prices are
    clamped into the rate-law domain afterwards, as in the undelayed
    system.
    """
    return _advance(model, params, gains, state, history, dt)[0]


@dataclass
class DelayedRun:
    times: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    ybar: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    clamp_events: int = 0
    failure: str | None = None
    failed_at: float | None = None

    @property
    def final(self) -> DelayedState:
        return DelayedState(self.mu[-1], self.nu[-1], self.ybar[-1], float(self.times[-1]),
                            self.clamp_events)


def simulate_delayed(model: NetworkModel, params: AlgorithmParams, gains: DelayGains,
                     state: DelayedState, dt: float, duration: float,
                     history: HistoryBuffer | None = None) -> DelayedRun:
    """Run :func:`step_delayed` for ``duration`` seconds recording every step.

    Row ``k`` holds the state at step ``k`` with the rates sent and the
    link loads seen at that instant; ``z`` is therefore the delayed
    arrival load. The last row has prices only. Failures truncate the trace
    and are recorded rather than raised.
    """
    if params.gamma <= 0.0:
        raise ValueError("gamma = 0 gives x_r = 0; the dynamics need gamma in (0, 1]")
    if history is None:
        history = new_history(model, params, state, dt)
    n = int(round(duration / dt))
    J, R, S = model.J, model.R, model.S
    out = {k: np.full((n + 1, m), np.nan) for k, m in
           (("mu", J), ("nu", S), ("ybar", S), ("x", R), ("y", S), ("z", J))}
    o_mu, o_nu, o_yb, o_x, o_y, o_z = (out[k] for k in ("mu", "nu", "ybar", "x", "y", "z"))
    t0 = state.t
    failure = failed_at = None
    k = 0
    while True:
        o_mu[k], o_nu[k], o_yb[k] = state.mu, state.nu, state.ybar
        if k == n:
            break
        try:
            nxt, rates, arrivals = _advance(model, params, gains, state, history, dt)
        except (NonFiniteState, PriceDomainViolation) as exc:
            failure, failed_at = f"{type(exc).__name__}: {exc}", state.t + dt
            break
        o_x[k], o_y[k], o_z[k] = rates.x, rates.y, arrivals
        state = nxt
        k += 1
    m = k + 1
    return DelayedRun(times=t0 + dt * np.arange(m), clamp_events=state.clamp_events,
                      failure=failure, failed_at=failed_at,
                      **{key: v[:m] for key, v in out.items()})


def compute_a_s(source: Source, params: AlgorithmParams, ybar: float, generic: bool = False) -> float:
    """Curvature margin ``a_s = -U''/U' - 1/(p ybar)`` at ``ybar``.

    For the alpha-fair family this is ``(alpha p - 1)/(p ybar)``;
    ``generic=True`` evaluates the derivative ratio instead.
    """
    if not ybar > 0:
        raise ValueError("ybar must be > 0")
    p = params.p
    if generic:
        ratio = -utility_second(ybar, source.weight, source.alpha) / utility_prime(ybar, source.weight, source.alpha)
        a = float(ratio) - 1.0 / (p * ybar)
    else:
        a = (source.alpha * p - 1.0) / (p * ybar)
    if not a > 0:
        raise AssumptionHViolated(f"source {source.id!r}: a_s = {a:.6g} <= 0 (alpha*p = {source.alpha * p:g})")
    return a


@dataclass
class StabilityReport:
    """Margins of the decentralized delay conditions; each must stay below 1.

    ``source_kappa`` is NaN when ``gamma == 1`` (no source-price dynamics).
    """

    link: np.ndarray
    source_kappa: np.ndarray
    source_rho: np.ndarray
    almost_saturated: list = field(default_factory=list)

    @property
    def verdict(self) -> bool:
        margins = np.concatenate([self.link, self.source_kappa, self.source_rho])
        margins = margins[~np.isnan(margins)]
        return bool(np.all(margins < 1.0) and not self.almost_saturated)

    @property
    def worst(self) -> float:
        return float(np.nanmax(np.concatenate([self.link, self.source_kappa, self.source_rho])))


def almost_saturated_links(model: NetworkModel, mu, z, mu_tol=1e-12, load_tol=1e-9) -> list[int]:
    """Links with zero price whose load equals capacity (within relative ``load_tol``)."""
    mu, z = np.asarray(mu, dtype=float), np.asarray(z, dtype=float)
    hit = (mu <= mu_tol) & (np.abs(z - model.capacity) <= load_tol * model.capacity)
    return np.flatnonzero(hit).tolist()


def check_stability_conditions(model: NetworkModel, params: AlgorithmParams, gains: DelayGains,
                               equilibrium, mu_tol=1e-12, load_tol=1e-9) -> StabilityReport:
    """Evaluate the per-link and per-source delay conditions at an equilibrium.

    ``equilibrium`` needs ``x``, ``mu`` and ``ybar`` attributes (a
    :class:`~mpdual.oracle.PrimalSolution` or a converged run's values).
    """
    x = np.asarray(equilibrium.x, dtype=float)
    ybar = np.asarray(equilibrium.ybar, dtype=float)
    A, B, T = model.routing_matrix, model.source_matrix, model.round_trip
    g, q = params.gamma, params.q
    quarter = math.pi / 4.0
    link = gains.kappa_link * (A @ (x * T)) / (g * quarter)
    if unit_mode(params):
        source_kappa = np.full(model.S, np.nan)
    else:
        source_kappa = gains.kappa_source * (B @ (x * T)) / (g * quarter)
    a = np.array([compute_a_s(s, params, yb) for s, yb in zip(model.sources, ybar)])
    source_rho = gains.rho * a * (B @ (x ** (1.0 / q) * T)) / quarter
    sat = almost_saturated_links(model, equilibrium.mu, A @ x, mu_tol, load_tol)
    return StabilityReport(link=link, source_kappa=source_kappa, source_rho=source_rho,
                           almost_saturated=sat)


def default_max_rate(model: NetworkModel) -> np.ndarray:
    """``M_s``: sum over the source's routes of each route's bottleneck capacity."""
    A, c = model.routing_matrix, model.capacity
    bottleneck = np.array([c[A[:, r] > 0].min() for r in range(model.R)])
    return model.source_matrix @ bottleneck


def scalable_gains(model: NetworkModel, params: AlgorithmParams, x_estimate, kappa: float,
                   max_rate=None) -> DelayGains:
    """Gains each link and source can pick from local quantities.

    ``kappa_s = gamma kappa/(M_s Tbar_s)``, ``rho_s = p kappa/((alpha p - 1) Tbar_s)``
    and ``kappa_j = gamma kappa/(c_j Tbar_j)``, where the ``Tbar`` are
    rate-weighted mean round trips under ``x_estimate``. A link carrying no
    estimated traffic uses the longest round trip through it (or through
    the network if no route uses it).
    """
    if not 0.0 < kappa < math.pi / 4.0:
        raise ValueError(f"kappa must lie in (0, pi/4), got {kappa}")
    x = np.asarray(x_estimate, dtype=float)
    if x.shape != (model.R,) or np.any(x < 0):
        raise ValueError("x_estimate must be a nonnegative per-route vector")
    A, B, T = model.routing_matrix, model.source_matrix, model.round_trip
    M = default_max_rate(model) if max_rate is None else np.broadcast_to(np.asarray(max_rate, float), (model.S,))
    y = B @ x
    if np.any(y <= 0):
        raise ValueError("every source needs positive estimated traffic")
    if np.any(M < y):
        log.warning("max rate below estimated source rate for %s",
                    [model.sources[i].id for i in np.flatnonzero(M < y)])
    t_src = (B @ (x * T)) / y
    load = A @ x
    t_link = np.empty(model.J)
    for j in range(model.J):
        on = A[j] > 0
        if load[j] > 0:
            t_link[j] = (A[j] @ (x * T)) / load[j]
        else:
            t_link[j] = T[on].max() if on.any() else T.max()
    if np.any(t_src <= 0) or np.any(t_link <= 0):
        raise ValueError("mean round-trip times must be positive")
    g, p = params.gamma, params.p
    h = model.alpha * p - 1.0
    if np.any(h <= 0):
        raise AssumptionHViolated("alpha*p must exceed 1 for every source")
    return DelayGains(
        kappa_link=g * kappa / (model.capacity * t_link),
        kappa_source=g * kappa / (M * t_src),
        rho=p * kappa / (h * t_src),
    )


def equilibrium_identities(model: NetworkModel, params: AlgorithmParams, mu, nu, ybar, x) -> dict:
    """Residuals of the per-route equilibrium identity and price-ratio bound.

    ``identity``: ``x_r/(ybar^(1/p) U') - gamma x_r^(1/q)/(lambda_r - nu)``.
    ``bound``: ``1 + (nu + sum mu_j)/(lambda_r - nu) - 2/gamma``, which is
    at most 0 at an equilibrium.
    """
    p, q, g = params.p, params.q, params.gamma
    mu, ybar, x = (np.asarray(v, dtype=float) for v in (mu, ybar, x))
    nu = np.zeros(model.S) if unit_mode(params) else np.asarray(nu, dtype=float)
    rs = model.route_source
    lam = model.routing_matrix.T @ mu
    d = lam - nu[rs]
    up = utility_prime(ybar, model.weight, model.alpha)
    identity = x / (ybar[rs] ** (1.0 / p) * up[rs]) - g * x ** (1.0 / q) / d
    bound = 1.0 + (nu[rs] + lam) / d - 2.0 / g
    return {"identity": identity, "bound": bound}


def peak_to_peak(series: np.ndarray, fraction: float = OSCILLATION_FRACTION) -> np.ndarray:
    """Per-column ``max - min`` over the trailing ``fraction`` of the samples."""
    series = np.asarray(series, dtype=float)
    start = int(len(series) * (1.0 - fraction))
    tail = series[start:]
    tail = tail[~np.isnan(tail).any(axis=1)] if tail.ndim == 2 else tail[~np.isnan(tail)]
    return tail.max(axis=0) - tail.min(axis=0)


def oscillating_links(model: NetworkModel, z: np.ndarray, fraction: float = OSCILLATION_FRACTION,
                      threshold: float = OSCILLATION_THRESHOLD) -> list[int]:
    """Links whose load swings by more than ``threshold * c_j`` over the trailing window."""
    amp = peak_to_peak(z, fraction)
    return np.flatnonzero(amp > threshold * model.capacity).tolist()
