"""Independent convex-programming reference for equilibria.

Both primal problems are solved directly in the route rates with a
log-barrier interior-point method (damped Newton on the barrier
subproblems). Nothing here touches the closed-form rate laws of
:mod:`mpdual.dual`, so agreement between the two is a genuine check.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls
from mpdual.errors import NonConvergence
from mpdual.network import AlgorithmParams, NetworkModel, utility, utility_prime, utility_second

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
MAX_NEWTON = 200
MAX_OUTER = 60


@dataclass(frozen=True)
class KktResidual:
    """Residuals of the subproblem optimality conditions at a primal/dual pair.

    ``eta_over_q`` is the multiplier recovered from the marginal-utility
    condition, so that condition holds exactly by construction.
    """

    eta_over_q: np.ndarray
    route_stationarity: np.ndarray
    source_stationarity: np.ndarray
    blend: np.ndarray
    coupling: np.ndarray
    slackness: np.ndarray
    capacity_violation: np.ndarray
    dual_violation: np.ndarray

    @property
    def max(self) -> float:
        parts = (self.route_stationarity, self.source_stationarity, self.blend, self.coupling,
                 self.slackness, self.capacity_violation, self.dual_violation)
        return float(max(np.max(np.abs(v), initial=0.0) for v in parts))

    def as_dict(self) -> dict:
        return {
            "route_stationarity": float(np.max(np.abs(self.route_stationarity), initial=0.0)),
            "source_stationarity": float(np.max(np.abs(self.source_stationarity), initial=0.0)),
            "blend": float(np.max(np.abs(self.blend), initial=0.0)),
            "coupling": float(np.max(np.abs(self.coupling), initial=0.0)),
            "slackness": float(np.max(np.abs(self.slackness), initial=0.0)),
            "capacity_violation": float(np.max(self.capacity_violation, initial=0.0)),
            "dual_violation": float(np.max(self.dual_violation, initial=0.0)),
        }


@dataclass(frozen=True)
class PrimalSolution:
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    ybar: np.ndarray
    objective: float
    mu: np.ndarray
    nu: np.ndarray
    residual: KktResidual | None = None
    iterations: int = 0
    gap: float = float("nan")


@dataclass(frozen=True)
class ApproxBound:
    e_gamma: np.ndarray
    kelly_value: float
    generalized_value: float
    inflated_value: float

    @property
    def lower_slack(self) -> float:
        """``sum U(sum x') - sum U(sum x)``; non-negative when the first inequality holds."""
        return self.kelly_value - self.generalized_value

    @property
    def upper_slack(self) -> float:
        """``sum U(e_gamma sum x) - sum U(sum x')``; non-negative when the second holds."""
        return self.inflated_value - self.kelly_value


@dataclass
class Lemma1Report:
    bound: ApproxBound
    tol: float
    passed: bool
    generalized: PrimalSolution
    kelly: PrimalSolution
    meta: dict = field(default_factory=dict)


def _blend(model, params, x):
    """``u_s = gamma sum x_r^(1/q) + (1-gamma) y_s^(1/q)`` and ``y_s``."""
    q = params.q
    y = model.source_matrix @ x
    u = params.gamma * (model.source_matrix @ x ** (1.0 / q)) + (1.0 - params.gamma) * y ** (1.0 / q)
    return u, y


def generalized_objective(model, params, x) -> float:
    u, _ = _blend(model, params, x)
    return float(np.sum(utility(u ** params.q, model.weight, model.alpha)))


def kelly_objective(model, x) -> float:
    return float(np.sum(utility(model.source_matrix @ x, model.weight, model.alpha)))


def _generalized_derivatives(model, params, x):
    """Value, gradient and Hessian of ``sum_s U_s(u_s^q)`` in the route rates."""
    p, q, g = params.p, params.q, params.gamma
    R = model.R
    grad = np.zeros(R)
    hess = np.zeros((R, R))
    value = 0.0
    for s_i, src in enumerate(model.sources):
        idx = np.array([model.route_index[r] for r in src.route_ids])
        xs = x[idx]
        y = xs.sum()
        u = g * np.sum(xs ** (1.0 / q)) + (1.0 - g) * y ** (1.0 / q)
        yb = u ** q
        w, a = src.weight, src.alpha
        up = utility_prime(yb, w, a)
        upp = utility_second(yb, w, a)
        du = (g * xs ** (-1.0 / p) + (1.0 - g) * y ** (-1.0 / p)) / q
        d2u = -(1.0 / (p * q)) * (np.diag(g * xs ** (-1.0 / p - 1.0)) + (1.0 - g) * y ** (-1.0 / p - 1.0))
        # phi(u) = U'(u^q) u^(q-1) is the scalar chain factor
        phi = up * u ** (q - 1.0)
        dphi = upp * q * u ** (2.0 * (q - 1.0)) + up * (q - 1.0) * u ** (q - 2.0)
        value += float(utility(yb, w, a))
        grad[idx] = q * phi * du
        hess[np.ix_(idx, idx)] = q * dphi * np.outer(du, du) + q * phi * d2u
    return value, grad, hess


def _kelly_derivatives(model, x):
    B = model.source_matrix
    y = B @ x
    value = float(np.sum(utility(y, model.weight, model.alpha)))
    up = utility_prime(y, model.weight, model.alpha)
    upp = utility_second(y, model.weight, model.alpha)
    return value, B.T @ up, B.T @ (upp[:, None] * B)


def _interior_start(model):
    A, c = model.routing_matrix, model.capacity
    share = c / np.maximum(A.sum(axis=1), 1.0)
    x = np.array([0.5 * share[A[:, r] > 0].min() for r in range(model.R)])
    return x


def _barrier_newton(model, derivatives, x, t, max_newton=MAX_NEWTON):
    """Minimise ``-t F(x) - sum log x - sum log(c - Ax)`` by damped Newton."""
    A, c = model.routing_matrix, model.capacity

    def phi(v):
        slack = c - A @ v
        if v.min() <= 0 or slack.min() <= 0:
            return np.inf
        return -t * derivatives(v)[0] - np.sum(np.log(v)) - np.sum(np.log(slack))

    for it in range(max_newton):
        f, g, H = derivatives(x)
        slack = c - A @ x
        grad = -t * g - 1.0 / x + A.T @ (1.0 / slack)
        hess = -t * H + np.diag(1.0 / x ** 2) + A.T @ ((1.0 / slack ** 2)[:, None] * A)
        try:
            step = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
        decrement = float(-grad @ step)
        if decrement / 2.0 <= 1e-14:
            return x, it
        # stay strictly inside the polytope
        s = 1.0
        neg = step < 0
        if neg.any():
            s = min(s, 0.99 * float(np.min(-x[neg] / step[neg])))
        As = A @ step
        pos = As > 0
        if pos.any():
            s = min(s, 0.99 * float(np.min(slack[pos] / As[pos])))
        f0 = phi(x)
        while phi(x + s * step) > f0 - 0.25 * s * decrement:
            s *= 0.5
            if s < 1e-16:
                return x, it
        x = x + s * step
    return x, max_newton


def recover_duals(model, params, x, t):
    """Prices implied by a point on the central path with barrier weight ``t``.

    Link prices are the barrier duals ``1/(t (c - Ax))``; source prices
    follow from the aggregate-rate condition.
    """
    p, q, g = params.p, params.q, params.gamma
    u, y = _blend(model, params, x)
    eta_over_q = utility_prime(u ** q, model.weight, model.alpha) * u ** (q - 1.0)
    nu = (1.0 - g) * eta_over_q * y ** (-1.0 / p)
    mu = None if np.isinf(t) else 1.0 / (t * (model.capacity - model.routing_matrix @ x))
    return mu, nu, u, y


def _polish(model, params, x, active, iters=30):
    """Newton on the equality KKT system with the links in ``active`` held at capacity.

    Returns ``(x, mu)`` or ``None`` when the iterate leaves the positive orthant
    or the active-set prices come out negative.
    """
    A = model.routing_matrix[active]
    c = model.capacity[active]
    R, k = model.R, int(active.sum())
    if k == 0:
        return None
    mu_a = np.zeros(k)
    for _ in range(iters):
        _, g, H = _generalized_derivatives(model, params, x)
        F = np.concatenate([g - A.T @ mu_a, A @ x - c])
        K = np.block([[H, -A.T], [A, np.zeros((k, k))]])
        d = np.linalg.lstsq(K, -F, rcond=None)[0]
        x_new = x + d[:R]
        if x_new.min() <= 0:
            return None
        x, mu_a = x_new, mu_a + d[R:]
        if np.max(np.abs(d[:R]) / x) < 1e-15:
            break
    g = _generalized_derivatives(model, params, x)[1]
    if mu_a.min() < 0:
        # rank-deficient active rows leave the split of prices free; pick a nonnegative one
        mu_a, _ = nnls(A.T, g)
    mu = np.zeros(model.J)
    mu[active] = mu_a
    return x, mu


def kkt_residual(model: NetworkModel, params: AlgorithmParams, x, y, u, mu, nu) -> KktResidual:
    """Residuals of the optimality conditions at ``(x, y, u)`` with prices ``(mu, nu)``.

    The multiplier ``eta_s`` is recovered from the marginal-utility
    condition; the route, source and blend conditions, the coupling
    ``y_s = sum x_r``, link complementary slackness and primal/dual
    feasibility are then reported. Residuals are never raised.
    """
    p, q, g = params.p, params.q, params.gamma
    x, y, u = (np.asarray(v, dtype=float) for v in (x, y, u))
    mu, nu = np.asarray(mu, dtype=float), np.asarray(nu, dtype=float)
    ybar = u ** q
    eta_over_q = utility_prime(ybar, model.weight, model.alpha) * u ** (q - 1.0)
    lam = model.routing_matrix.T @ mu
    rs = model.route_source
    route = g * eta_over_q[rs] * x ** (-1.0 / p) - (lam - nu[rs])
    source = (1.0 - g) * eta_over_q * y ** (-1.0 / p) - nu
    blend = u - (g * (model.source_matrix @ x ** (1.0 / q)) + (1.0 - g) * y ** (1.0 / q))
    coupling = y - model.source_matrix @ x
    z = model.routing_matrix @ x
    return KktResidual(
        eta_over_q=eta_over_q,
        route_stationarity=route,
        source_stationarity=source,
        blend=blend,
        coupling=coupling,
        slackness=mu * (z - model.capacity),
        capacity_violation=np.maximum(z - model.capacity, 0.0),
        dual_violation=np.maximum(-np.concatenate([mu, nu]), 0.0),
    )


def solve_generalized_primal(model: NetworkModel, params: AlgorithmParams,
                             tol: float = DEFAULT_TOL, max_outer: int = MAX_OUTER) -> PrimalSolution:
    """Maximise ``sum_s U_s(u_s^q)`` over the capacity polytope.

    Barrier weights grow tenfold per outer iteration until the KKT residual
    of the recovered primal/dual pair drops below ``tol``.
    """
    if not 0.0 < params.gamma <= 1.0:
        raise ValueError("the generalized problem is solved for gamma in (0, 1]; use solve_kelly_primal")
    if not tol > 0:
        raise ValueError("tol must be > 0")

    def derivs(v):
        return _generalized_derivatives(model, params, v)

    x = _interior_start(model)
    t = 1.0
    best = np.inf
    total = 0
    for outer in range(max_outer):
        x, its = _barrier_newton(model, derivs, x, t)
        total += its
        mu, nu, u, y = recover_duals(model, params, x, t)
        cand = (x, mu, nu, u, y, kkt_residual(model, params, x, y, u, mu, nu))
        if cand[-1].max >= tol and (model.R + model.J) / t < 1e-3:
            # the central path is close enough to read off the binding links
            slack = model.capacity - model.routing_matrix @ x
            polished = _polish(model, params, x.copy(), mu > slack)
            if polished is not None:
                xp, mup = polished
                _, nup, up, yp = recover_duals(model, params, xp, np.inf)
                res_p = kkt_residual(model, params, xp, yp, up, mup, nup)
                if res_p.max < cand[-1].max:
                    cand = (xp, mup, nup, up, yp, res_p)
        xs, mus, nus, us, ys, res = cand
        best = min(best, res.max)
        log.debug("outer %d: t=%.3g residual=%.3g", outer, t, res.max)
        if res.max < tol:
            return PrimalSolution(x=xs, y=ys, u=us, ybar=us ** params.q,
                                  objective=generalized_objective(model, params, xs),
                                  mu=mus, nu=nus, residual=res, iterations=total,
                                  gap=(model.R + model.J) / t)
        t *= 10.0
    raise NonConvergence(f"generalized primal: KKT residual {best:.3g} after {max_outer} barrier rounds",
                         residual=best)


def solve_kelly_primal(model: NetworkModel, params: AlgorithmParams | None = None,
                       tol: float = DEFAULT_TOL, max_outer: int = MAX_OUTER) -> PrimalSolution:
    """Maximise ``sum_s U_s(sum_r x_r)`` over the capacity polytope.

    The optimal value is unique but the route split need not be; the value
    is certified through the barrier duality gap ``(R + J)/t < tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")

    def derivs(v):
        return _kelly_derivatives(model, v)

    x = _interior_start(model)
    t = 1.0
    m = model.R + model.J
    total = 0
    for outer in range(max_outer):
        x, its = _barrier_newton(model, derivs, x, t)
        total += its
        if m / t < tol:
            y = model.source_matrix @ x
            slack = model.capacity - model.routing_matrix @ x
            return PrimalSolution(x=x, y=y, u=y.copy(), ybar=y.copy(),
                                  objective=kelly_objective(model, x),
                                  mu=1.0 / (t * slack), nu=np.zeros(model.S),
                                  iterations=total, gap=m / t)
        t *= 10.0
    raise NonConvergence(f"Kelly primal: gap {m / t:.3g} after {max_outer} barrier rounds", residual=m / t)


def approx_error_factor(gamma: float, p: float, route_count) -> np.ndarray | float:
    """Rate inflation ``(1 + gamma (|s|^(1/p) - 1))^q`` bounding the utility gap."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if not p > 1:
        raise ValueError("p must be > 1")
    n = np.asarray(route_count, dtype=float)
    if np.any(n < 1):
        raise ValueError("route_count must be >= 1")
    q = p / (p - 1.0)
    out = (1.0 + gamma * (n ** (1.0 / p) - 1.0)) ** q
    return float(out) if out.ndim == 0 else out


def verify_lemma1(model: NetworkModel, params: AlgorithmParams, tol: float = 1e-6,
                  solver_tol: float = DEFAULT_TOL) -> Lemma1Report:
    """Check both sides of the utility sandwich between the two problems.

    Passes when ``sum U(sum x') >= sum U(sum x) - tol`` and
    ``sum U(e_gamma sum x) >= sum U(sum x') - tol``.
    """
    gen = solve_generalized_primal(model, params, solver_tol)
    kel = solve_kelly_primal(model, params, solver_tol)
    e = np.atleast_1d(approx_error_factor(params.gamma, params.p, model.routes_per_source))
    y = model.source_matrix @ gen.x
    bound = ApproxBound(
        e_gamma=e,
        kelly_value=kel.objective,
        generalized_value=float(np.sum(utility(y, model.weight, model.alpha))),
        inflated_value=float(np.sum(utility(e * y, model.weight, model.alpha))),
    )
    passed = bound.lower_slack >= -tol and bound.upper_slack >= -tol
    return Lemma1Report(bound=bound, tol=tol, passed=passed, generalized=gen, kelly=kel)
