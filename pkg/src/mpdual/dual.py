"""Closed-form rate laws, undelayed price dynamics and the dual objective.

Link prices ``mu`` follow the projected load excess and source prices ``nu``
follow the mismatch between the aggregate demand ``y_s`` and the sum of
route rates. The dual objective ``W`` is a Lyapunov function for the
continuous-time system; :func:`dual_objective` evaluates it so callers can
watch it decrease along trajectories.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from mpdual.errors import NonFiniteState, PriceDomainViolation
from mpdual.network import AlgorithmParams, NetworkModel, Source, demand

log = logging.getLogger(__name__)

EPS_PRICE = 1e-9
DEFAULT_DT = 0.005

Gain = Union[float, np.ndarray, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class PriceState:
    mu: np.ndarray
    nu: np.ndarray
    t: float = 0.0
    clamp_events: int = 0


@dataclass(frozen=True)
class RateVector:
    x: np.ndarray
    y: np.ndarray
    ybar: np.ndarray
    lam: np.ndarray
    z: np.ndarray


@dataclass(frozen=True)
class GainFunctions:
    """Link and source gains.

    Each gain is a positive constant, a per-element array, or a callable of
    the current price vector returning positive values (the general
    price-dependent form).
    """

    kappa_link: Gain = 1.0
    kappa_source: Gain = 1.0

    def link(self, mu):
        return _evaluate(self.kappa_link, mu)

    def source(self, nu):
        return _evaluate(self.kappa_source, nu)


def _evaluate(gain, price):
    if callable(gain):
        return np.asarray(gain(price), dtype=float)
    return gain


def proj(b, c):
    """``(b)^+_c``: ``b`` where ``c > 0``, ``max(0, b)`` where ``c == 0``."""
    if c.min() > 0:
        return b
    return np.where(c > 0, b, np.maximum(b, 0.0))


def unit_mode(params: AlgorithmParams) -> bool:
    """``gamma == 1``: source prices vanish and ``y_s`` is the plain route sum."""
    return params.gamma == 1.0


def aggregate_prices(model: NetworkModel, mu) -> np.ndarray:
    return model.route_price(np.asarray(mu, dtype=float))


def _price_index(lam_minus_nu, nu, gamma, p):
    """``(gamma^p sum (lam-nu)^(1-p) + (1-gamma)^p nu^(1-p))^(1/(1-p))``."""
    total = gamma ** p * np.sum(lam_minus_nu ** (1.0 - p))
    if gamma < 1.0:
        total = total + (1.0 - gamma) ** p * nu ** (1.0 - p)
    return total ** (1.0 / (1.0 - p))


def _check_domain(lam, nu_r, nu, gamma, eps=EPS_PRICE):
    # clamping leaves exactly eps of headroom; allow for rounding of lam - (lam - eps)
    floor = 0.5 * eps
    if (lam - nu_r).min(initial=np.inf) > floor and (gamma == 1.0 or nu.min(initial=np.inf) > floor):
        return
    bad_route = lam - nu_r <= floor
    bad_source = (nu <= floor) if gamma < 1.0 else np.zeros(nu.shape, dtype=bool)
    raise PriceDomainViolation(
        f"prices outside lambda_r > nu_s > 0: routes {np.flatnonzero(bad_route).tolist()},"
        f" sources {np.flatnonzero(bad_source).tolist()}")


def ybar_from_prices(lam_s, nu_s: float, params: AlgorithmParams, source: Source) -> float:
    """Relaxed aggregate ``ybar_s`` for one source given its route prices."""
    lam_s = np.asarray(lam_s, dtype=float)
    g = params.gamma
    if g == 1.0:
        nu_s = 0.0
    _check_domain(lam_s, nu_s, np.array([nu_s]), g)
    price = _price_index(lam_s - nu_s, nu_s, g, params.p)
    return float(demand(price, source.weight, source.alpha))


def _ybar(model, gamma, p, d, nu):
    total = model.source_matrix @ (gamma ** p * d ** (1.0 - p))
    if gamma < 1.0:
        total = total + (1.0 - gamma) ** p * nu ** (1.0 - p)
    # demand at the blended price index
    return (model.weight * total ** (1.0 / (p - 1.0))) ** (1.0 / model.alpha)


def ybar_all(model: NetworkModel, params: AlgorithmParams, lam, nu) -> np.ndarray:
    nu = np.zeros(model.S) if unit_mode(params) else np.asarray(nu, dtype=float)
    d = np.asarray(lam, dtype=float) - nu[model.route_source]
    _check_domain(d, 0.0, nu, params.gamma)
    return _ybar(model, params.gamma, params.p, d, nu)


def _rates(model, gamma, p, lam, nu, ybar):
    nu_r = nu[model.route_source]
    d = lam - nu_r
    up = model.weight * ybar ** -model.alpha
    x = ybar[model.route_source] * (gamma * up[model.route_source] / d) ** p
    if gamma < 1.0:
        y = ybar * ((1.0 - gamma) * up / nu) ** p
    else:
        y = model.source_matrix @ x
    return RateVector(x=x, y=y, ybar=ybar, lam=lam, z=model.routing_matrix @ x)


def route_rates(model: NetworkModel, params: AlgorithmParams, lam, nu, ybar) -> RateVector:
    """Rates for given route prices, source prices and relaxed aggregates.

    ``ybar`` need not be the algebraic value; the delayed system passes its
    own dynamic state here.
    """
    lam = np.asarray(lam, dtype=float)
    nu = np.zeros(model.S) if unit_mode(params) else np.asarray(nu, dtype=float)
    _check_domain(lam, nu[model.route_source], nu, params.gamma)
    return _rates(model, params.gamma, params.p, lam, nu, np.asarray(ybar, dtype=float))


def rates_from_prices(model: NetworkModel, params: AlgorithmParams, mu, nu) -> RateVector:
    """Rates at prices ``(mu, nu)`` with ``ybar`` solved from the demand law."""
    if params.gamma <= 0.0:
        raise ValueError("gamma = 0 gives x_r = 0; the dynamics need gamma in (0, 1]")
    nu = np.zeros(model.S) if unit_mode(params) else np.asarray(nu, dtype=float)
    lam = model.routing_matrix.T @ np.asarray(mu, dtype=float)
    d = lam - nu[model.route_source]
    _check_domain(d, 0.0, nu, params.gamma)
    ybar = _ybar(model, params.gamma, params.p, d, nu)
    return _rates(model, params.gamma, params.p, lam, nu, ybar)


def clamp_source_prices(model: NetworkModel, params: AlgorithmParams, lam, nu,
                        eps: float = EPS_PRICE) -> tuple[np.ndarray, int]:
    """Clamp ``nu_s`` into ``[eps, min_r lam_r - eps]``; returns the new vector and clamp count."""
    if unit_mode(params):
        return np.zeros(model.S), 0
    if nu.min() >= eps and (lam - nu[model.route_source]).min() >= eps:
        return nu, 0
    upper = model.source_min(lam) - eps
    if upper.min() < eps:
        raise PriceDomainViolation(
            f"route prices too small to admit a source price: sources {np.flatnonzero(upper < eps).tolist()}")
    clamped = np.clip(nu, eps, upper)
    return clamped, int(np.count_nonzero(clamped != nu))


def initial_state(model: NetworkModel, params: AlgorithmParams, mu0=0.01, nu_fraction=0.5) -> PriceState:
    """Default start: ``mu_j = 0.01`` and ``nu_s`` half the cheapest route price."""
    mu = np.broadcast_to(np.asarray(mu0, dtype=float), (model.J,)).copy()
    lam = aggregate_prices(model, mu)
    if unit_mode(params):
        return PriceState(mu, np.zeros(model.S))
    return PriceState(mu, nu_fraction * model.source_min(lam))


def price_derivative(model: NetworkModel, params: AlgorithmParams, gains: GainFunctions,
                     state: PriceState, rates: RateVector | None = None):
    """Right-hand side ``(dmu/dt, dnu/dt)`` of the undelayed system."""
    if rates is None:
        rates = rates_from_prices(model, params, state.mu, state.nu)
    dmu = gains.link(state.mu) * proj(rates.z - model.capacity, state.mu)
    if unit_mode(params):
        dnu = np.zeros(model.S)
    else:
        dnu = gains.source(state.nu) * (rates.y - model.source_matrix @ rates.x)
    return dmu, dnu


def step_undelayed(model: NetworkModel, params: AlgorithmParams, gains: GainFunctions,
                   state: PriceState, dt: float = DEFAULT_DT,
                   rates: RateVector | None = None) -> PriceState:
    """One explicit-Euler step followed by clamping to the price domain.

    The projection acts inside the derivative; the clamp is applied to the
    updated state afterwards. ``rates`` may be passed when the caller has
    already evaluated them at ``state``.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    dmu, dnu = price_derivative(model, params, gains, state, rates)
    mu = np.maximum(state.mu + dt * dmu, 0.0)
    nu = state.nu + dt * dnu
    t = state.t + dt
    if not (np.isfinite(mu).all() and np.isfinite(nu).all()):
        raise NonFiniteState(f"non-finite prices at t={t:.6g}", t=t)
    nu, clamps = clamp_source_prices(model, params, model.routing_matrix.T @ mu, nu)
    if clamps:
        log.debug("clamped %d source prices at t=%.6g", clamps, t)
    return PriceState(mu, nu, t, state.clamp_events + clamps)


def objective_from_rates(model: NetworkModel, params: AlgorithmParams, mu, nu,
                         rates: RateVector) -> float:
    """``W`` given rates already evaluated at ``(mu, nu)``."""
    nu = np.zeros(model.S) if unit_mode(params) else np.asarray(nu, dtype=float)
    u = model.utility(rates.ybar)
    route_cost = model.source_matrix @ ((rates.lam - nu[model.route_source]) * rates.x)
    return float(np.sum(u - route_cost - nu * rates.y) + model.capacity @ np.asarray(mu, dtype=float))


def dual_objective(model: NetworkModel, params: AlgorithmParams, mu, nu) -> float:
    """``W(mu, nu) = sum_s W_s + c^T mu`` evaluated at the subproblem maximizer."""
    return objective_from_rates(model, params, mu, nu, rates_from_prices(model, params, mu, nu))


def dual_gradient(model: NetworkModel, params: AlgorithmParams, mu, nu):
    """``(dW/dmu, dW/dnu) = (c - z, sum_r x_r - y_s)``."""
    rates = rates_from_prices(model, params, mu, nu)
    return model.capacity - rates.z, model.source_matrix @ rates.x - rates.y


@dataclass
class UndelayedRun:
    times: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    x: np.ndarray
    y: np.ndarray
    ybar: np.ndarray
    z: np.ndarray
    W: np.ndarray
    clamp_events: int = 0
    failure: str | None = None
    failed_at: float | None = None

    @property
    def final(self) -> PriceState:
        return PriceState(self.mu[-1], self.nu[-1], float(self.times[-1]), self.clamp_events)


def simulate_undelayed(model: NetworkModel, params: AlgorithmParams, gains: GainFunctions,
                       state: PriceState, dt: float, duration: float,
                       record_objective: bool = True) -> UndelayedRun:
    """Integrate for ``duration`` seconds, recording every step.

    Performs the same arithmetic as repeated :func:`step_undelayed` calls with
    the per-step overhead hoisted out of the loop. A
    :class:`NonFiniteState` or :class:`PriceDomainViolation` truncates the
    run; the partial trace is kept and the failure recorded.
    """
    if params.gamma <= 0.0:
        raise ValueError("gamma = 0 gives x_r = 0; the dynamics need gamma in (0, 1]")
    if not dt > 0:
        raise ValueError("dt must be > 0")
    n = int(round(duration / dt))
    g, p = params.gamma, params.p
    unit = unit_mode(params)
    gp, hp = g ** p, (1.0 - g) ** p
    e1, e2 = 1.0 - p, 1.0 / (p - 1.0)
    A, At, B = model.routing_matrix, model.routing_matrix.T, model.source_matrix
    rs, c, w = model.route_source, model.capacity, model.weight
    inv_alpha, neg_alpha = 1.0 / model.alpha, -model.alpha
    floor = 0.5 * EPS_PRICE
    J, R, S = model.J, model.R, model.S
    # ufunc reductions skip the ndarray method wrappers, which dominate on tiny arrays
    vmin, vsum, dot = np.minimum.reduce, np.add.reduce, np.dot
    log_utility = bool(np.all(model.alpha == 1.0))

    def total_utility(ybar):
        if log_utility:
            return dot(w, np.log(ybar))
        return vsum(model.utility(ybar))

    out = {k: np.full((n + 1, m), np.nan) for k, m in
           (("mu", J), ("nu", S), ("x", R), ("y", S), ("ybar", S), ("z", J))}
    o_mu, o_nu, o_x, o_y, o_ybar, o_z = (out[k] for k in ("mu", "nu", "x", "y", "ybar", "z"))
    W = np.full(n + 1, np.nan)
    const_link = not callable(gains.kappa_link)
    const_source = not callable(gains.kappa_source)
    mu = np.asarray(state.mu, dtype=float)
    nu = np.zeros(S) if unit else np.asarray(state.nu, dtype=float)
    clamps = state.clamp_events
    failure = failed_at = None
    k = 0
    while True:
        t = state.t + k * dt
        lam = At @ mu
        d = lam - nu[rs]
        if min(vmin(d), floor + 1.0 if unit else vmin(nu)) <= floor:
            failure = f"PriceDomainViolation: prices outside lambda_r > nu_s > 0 at t={t:.6g}"
            failed_at = t
            break
        total = B @ (gp * d ** e1)
        if not unit:
            total = total + hp * nu ** e1
        ybar = (w * total ** e2) ** inv_alpha
        up = w * ybar ** neg_alpha
        x = ybar[rs] * (g * up[rs] / d) ** p
        sx = B @ x
        y = sx if unit else ybar * ((1.0 - g) * up / nu) ** p
        z = A @ x
        o_mu[k], o_nu[k], o_x[k], o_y[k], o_ybar[k], o_z[k] = mu, nu, x, y, ybar, z
        if record_objective:
            # same terms as objective_from_rates
            W[k] = total_utility(ybar) - dot(d, x) - dot(nu, y) + dot(c, mu)
        if k == n:
            break
        excess = z - c
        if vmin(mu) <= 0:
            excess = np.where(mu > 0, excess, np.maximum(excess, 0.0))
        kl = gains.kappa_link if const_link else gains.link(mu)
        mu_next = np.maximum(mu + dt * (kl * excess), 0.0)
        if unit:
            nu_next = nu
        else:
            ks = gains.kappa_source if const_source else gains.source(nu)
            nu_next = nu + dt * (ks * (y - sx))
        # a non-finite entry poisons the sum
        if not np.isfinite(vsum(mu_next) + vsum(nu_next)):
            failure = f"NonFiniteState: non-finite prices at t={t + dt:.6g}"
            failed_at = t + dt
            break
        if not unit and (vmin(nu_next) < EPS_PRICE or vmin(At @ mu_next - nu_next[rs]) < EPS_PRICE):
            try:
                nu_next, hit = clamp_source_prices(model, params, At @ mu_next, nu_next)
            except PriceDomainViolation as exc:
                failure, failed_at = f"PriceDomainViolation: {exc}", t + dt
                break
            clamps += hit
        mu, nu = mu_next, nu_next
        k += 1
    m = k + 1 if failure is None else k
    times = state.t + dt * np.arange(m)
    return UndelayedRun(times=times, W=W[:m], clamp_events=clamps, failure=failure,
                        failed_at=failed_at, **{key: v[:m] for key, v in out.items()})
