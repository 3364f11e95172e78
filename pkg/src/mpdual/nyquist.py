"""Linearization about a delayed equilibrium and return-ratio eigenvalue loci.

Perturbation coordinates are ordered ``[vbar_s (S), w_s (S), w_j (J)]``:
relaxed-aggregate, source-price and link-price perturbations. The loop
``xi = -G(omega) xi`` closes through the route-rate perturbations ``u_r``
and the aggregate perturbations ``v_s``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from mpdual.delayed import DelayGains, almost_saturated_links, compute_a_s
from mpdual.dual import unit_mode
from mpdual.errors import AlmostSaturatedLink
from mpdual.network import AlgorithmParams, NetworkModel, utility_prime

THETA_MIN = 1e-4
THETA_MAX = 1e4
POINTS_PER_DECADE = 2000
TWO_OVER_PI = 2.0 / math.pi


@dataclass(frozen=True)
class LinearizedModel:
    model: NetworkModel
    params: AlgorithmParams
    gains: DelayGains
    mu: np.ndarray
    nu: np.ndarray
    ybar: np.ndarray
    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    a: np.ndarray
    sigma: np.ndarray
    # 1/(lambda_r - nu_s)
    inv_gap: np.ndarray
    active: np.ndarray

    @property
    def size(self) -> int:
        return 2 * self.model.S + self.model.J

    def curvature_b(self) -> np.ndarray:
        """``(u^(q-1) U'(u^q))'`` at ``u = ybar^(1/q)``; negative under the curvature assumption."""
        q = self.params.q
        u = self.ybar ** (1.0 / q)
        up = utility_prime(self.ybar, self.model.weight, self.model.alpha)
        return -q * u ** (2.0 * (q - 1.0)) * up * self.a


def linearize(model: NetworkModel, params: AlgorithmParams, gains: DelayGains, equilibrium,
              mu_tol: float = 1e-12, load_tol: float = 1e-9) -> LinearizedModel:
    """Collect the coefficients of the linearized delay system at ``equilibrium``.

    ``equilibrium`` provides ``x``, ``mu``, ``nu`` and ``ybar``. Links with
    zero price drop out of the loop (their rows vanish); a zero-price link
    at capacity makes the linearization invalid.
    """
    x = np.asarray(equilibrium.x, dtype=float)
    mu = np.asarray(equilibrium.mu, dtype=float)
    ybar = np.asarray(equilibrium.ybar, dtype=float)
    nu = np.zeros(model.S) if unit_mode(params) else np.asarray(equilibrium.nu, dtype=float)
    sat = almost_saturated_links(model, mu, model.routing_matrix @ x, mu_tol, load_tol)
    if sat:
        raise AlmostSaturatedLink(f"zero-price links at capacity: {[model.links[j].id for j in sat]}")
    a = np.array([compute_a_s(s, params, yb) for s, yb in zip(model.sources, ybar)])
    lam = model.routing_matrix.T @ mu
    gap = lam - nu[model.route_source]
    if np.any(gap <= 0):
        raise ValueError("equilibrium violates lambda_r > nu_s")
    return LinearizedModel(
        model=model, params=params, gains=gains, mu=mu, nu=nu, ybar=ybar, x=x,
        y=model.source_matrix @ x, lam=lam, a=a,
        sigma=gains.rho * ybar ** (-1.0 / params.p) / params.p,
        inv_gap=1.0 / gap, active=mu > mu_tol,
    )


def _phases(lin, omega):
    m = lin.model
    A = m.routing_matrix.T
    fwd = np.zeros((len(omega), m.R, m.J), dtype=complex)
    back = np.zeros_like(fwd)
    fwd[:, m.hop_route, m.hop_link] = np.exp(-np.outer(omega, m.hop_t_rj))
    back[:, m.hop_route, m.hop_link] = np.exp(-np.outer(omega, m.hop_t_jr))
    return np.exp(-np.outer(omega, m.round_trip)), fwd, back, A


def return_ratio(lin: LinearizedModel, theta) -> np.ndarray:
    """``G(i theta)``; a scalar ``theta`` gives one matrix, an array a stack.

    Entries follow the closed-loop linear equations: rows for ``vbar_s``
    carry ``1/(omega + sigma_s)``, every other row ``1/omega``.
    """
    theta = np.asarray(theta, dtype=float)
    scalar = theta.ndim == 0
    theta = np.atleast_1d(theta)
    if np.any(theta == 0):
        raise ValueError("theta = 0 is a pole of the return ratio")
    omega = 1j * theta
    m, p = lin.model, lin.params
    S, J = m.S, m.J
    g, q = p.gamma, p.q
    unit = unit_mode(p)
    B = m.source_matrix
    k = lin.gains
    x, y, ig = lin.x, lin.y, lin.inv_gap
    E, fwd, back, _ = _phases(lin, omega)
    N = len(theta)
    G = np.zeros((N, 2 * S + J, 2 * S + J), dtype=complex)
    sv, sn, lk = slice(0, S), slice(S, 2 * S), slice(2 * S, 2 * S + J)

    xq = g * x ** (1.0 / q)
    yq = (1.0 - g) * y ** (1.0 / q)
    rho_w = k.rho / (omega[:, None] + lin.sigma)
    inv_w = 1.0 / omega[:, None]
    # vbar rows
    G[:, sv, sv] = np.einsum("ns,st->nst", rho_w * lin.a, np.eye(S)) * (
        (E * xq) @ B.T + yq)[:, :, None]
    nu_term = np.zeros(S) if unit else yq / lin.nu
    G[:, sv, sn] = np.einsum("ns,st->nst", rho_w, np.eye(S)) * (
        -(E * xq * ig) @ B.T + nu_term)[:, :, None]
    G[:, sv, lk] = rho_w[:, :, None] * np.einsum("sr,nr,nrj->nsj", B, E * xq * ig, back)
    # nu rows (absent when gamma = 1)
    if not unit:
        kn = k.kappa_source * lin.nu
        G[:, sn, sv] = np.einsum("ns,st->nst", inv_w * kn * lin.a, np.eye(S)) * (
            y - (E * x) @ B.T)[:, :, None]
        G[:, sn, sn] = np.einsum("ns,st->nst", inv_w * kn, np.eye(S)) * (
            y / lin.nu + (E * x * ig) @ B.T)[:, :, None]
        G[:, sn, lk] = -(inv_w * kn)[:, :, None] * np.einsum("sr,nr,nrj->nsj", B, E * x * ig, back)
    # link rows
    km = k.kappa_link * lin.mu
    kj = (inv_w * km)[:, :, None]
    G[:, lk, sv] = kj * lin.a[None, None, :] * np.einsum("nrj,r,sr->njs", fwd, x, B)
    G[:, lk, sn] = -kj * np.einsum("nrj,r,sr->njs", fwd, x * ig, B)
    G[:, lk, lk] = kj * np.einsum("nrj,r,nrk->njk", fwd, x * ig, back)
    return G[0] if scalar else G


def return_ratio_composed(lin: LinearizedModel, theta: float) -> np.ndarray:
    """``G(i theta)`` rebuilt by composing the linear maps one by one.

    Independent of the entry formulas in :func:`return_ratio`; used to
    cross-check them.
    """
    m, p = lin.model, lin.params
    S, J, R = m.S, m.J, m.R
    g, q, pp = p.gamma, p.q, p.p
    omega = 1j * theta
    n = 2 * S + J
    E, fwd, back, A = _phases(lin, np.array([omega]))
    E, fwd, back = E[0], fwd[0], back[0]
    B = m.source_matrix
    rs = m.route_source
    unit = unit_mode(p)
    # u = Mu xi, v = Mv xi
    Mu = np.zeros((R, n), dtype=complex)
    Mu[np.arange(R), rs] = lin.a[rs]
    Mu[:, 2 * S:] = lin.inv_gap[:, None] * back
    if not unit:
        Mu[np.arange(R), S + rs] = -lin.inv_gap
    Mu *= -pp * lin.x[:, None]
    Mv = np.zeros((S, n), dtype=complex)
    Mv[np.arange(S), np.arange(S)] = lin.a
    if not unit:
        Mv[np.arange(S), S + np.arange(S)] = 1.0 / lin.nu
    Mv *= -pp * lin.y[:, None]
    if unit:
        Mv = B @ Mu
    k = lin.gains
    rhs = np.zeros((n, n), dtype=complex)
    rhs[:S] = (k.rho / pp)[:, None] * (g * B @ ((lin.x ** (-1.0 / pp) * E)[:, None] * Mu)
                                       + (1.0 - g) * (lin.y ** (-1.0 / pp))[:, None] * Mv)
    rhs[:S] /= (omega + lin.sigma)[:, None]
    if not unit:
        rhs[S:2 * S] = (k.kappa_source * lin.nu / pp)[:, None] * (Mv - B @ (E[:, None] * Mu)) / omega
    rhs[2 * S:] = (k.kappa_link * lin.mu / pp)[:, None] * (fwd.T @ Mu) / omega
    return -rhs


def factorization(lin: LinearizedModel, theta: float) -> dict:
    """Diagonal compensators and the split ``G = P Y R(-w)^T X R(w) P^-1 + Gbar``.

    Only meaningful when every link price is positive and ``gamma < 1``
    (otherwise ``P`` is singular).
    """
    m, p = lin.model, lin.params
    S, J, R = m.S, m.J, m.R
    g, q = p.gamma, p.q
    omega = 1j * theta
    k = lin.gains
    n = 2 * S + J
    up = utility_prime(lin.ybar, m.weight, m.alpha)
    P = np.diag(np.concatenate([np.sqrt(k.rho / (lin.a * lin.ybar ** (1.0 / p.p) * up)),
                                np.sqrt(k.kappa_source * lin.nu),
                                np.sqrt(k.kappa_link * lin.mu)]))
    Y = np.diag(np.concatenate([omega / (omega + lin.sigma), np.ones(S + J)]))
    X = np.diag(np.exp(-omega * m.round_trip) / (omega * m.round_trip))

    def Rmat(w):
        Rm = np.zeros((R, n), dtype=complex)
        rs = m.route_source
        T = m.round_trip
        Rm[np.arange(R), rs] = np.sqrt(g * lin.x ** (1.0 / q) * T) * np.sqrt(k.rho * lin.a)[rs]
        Rm[np.arange(R), S + rs] = -np.sqrt(lin.x * T * lin.inv_gap) * np.sqrt(k.kappa_source * lin.nu)[rs]
        Rm[m.hop_route, 2 * S + m.hop_link] = (np.sqrt(lin.x * T * lin.inv_gap)[m.hop_route]
                                              * np.sqrt(k.kappa_link * lin.mu)[m.hop_link]
                                              * np.exp(-w * m.hop_t_jr))
        return Rm

    Gbar = np.zeros((n, n), dtype=complex)
    idx = np.arange(S)
    yq = (1.0 - g) * lin.y ** (1.0 / q)
    Gbar[idx, idx] = k.rho * lin.a / (omega + lin.sigma) * yq
    Gbar[idx, S + idx] = k.rho / (omega + lin.sigma) * yq / lin.nu
    Gbar[S + idx, idx] = k.kappa_source * lin.nu * lin.a / omega * lin.y
    Gbar[S + idx, S + idx] = k.kappa_source / omega * lin.y
    return {"P": P, "Y": Y, "X": X, "R_plus": Rmat(omega), "R_minus": Rmat(-omega), "Gbar": Gbar}


def factorized_return_ratio(lin: LinearizedModel, theta: float) -> np.ndarray:
    f = factorization(lin, theta)
    P = f["P"]
    core = f["Y"] @ f["R_minus"].T @ f["X"] @ f["R_plus"]
    return P @ core @ np.linalg.inv(P) + f["Gbar"]


def k_bound(lin: LinearizedModel) -> float:
    """Row-sum bound on ``||R(i theta) z||^2`` valid for every ``theta``.

    Evaluates ``||Q^-1 |R|^T |R| Q||_inf`` over the coordinates that take
    part in the loop (positive link prices; source prices only when
    ``gamma < 1``). Entry magnitudes of ``R`` do not depend on ``theta``, so
    this dominates the per-frequency norm.
    """
    m, p = lin.model, lin.params
    S = m.S
    k = lin.gains
    f = factorization(lin, 1.0)
    Rabs = np.abs(f["R_plus"])
    up = utility_prime(lin.ybar, m.weight, m.alpha)
    with np.errstate(divide="ignore", invalid="ignore"):
        Q = np.concatenate([np.sqrt(lin.ybar ** (1.0 / p.p) * up / (k.rho * lin.a)),
                            np.sqrt(lin.nu / k.kappa_source),
                            np.sqrt(lin.mu / k.kappa_link)])
    keep = np.concatenate([np.ones(S, bool), np.full(S, not unit_mode(p)), lin.active])
    Rk, Qk = Rabs[:, keep], Q[keep]
    M = Rk.T @ Rk
    scaled = M * Qk[None, :] / Qk[:, None]
    return float(np.abs(scaled).sum(axis=1).max())


def delay_kernel_min(lo: float = 1e-3, hi: float = 1e3, n: int = 200001) -> tuple[float, float]:
    """Minimum of ``Re(e^{-i s}/(i s)) = -sin(s)/s`` over a log grid; returns ``(value, argmin)``."""
    s = np.geomspace(lo, hi, n)
    vals = np.real(np.exp(-1j * s) / (1j * s))
    i = int(np.argmin(vals))
    return float(vals[i]), float(s[i])


def delay_kernel_axis_crossings(lo: float = 1e-3, hi: float = 1e3, n: int = 200001) -> np.ndarray:
    """Real parts where the curve ``s -> e^{-i s}/(i s)`` meets the real axis.

    ``Im = -cos(s)/s`` vanishes at ``s = pi/2 + k pi``; crossings are located
    on the grid by sign changes and linear interpolation. The leftmost one
    is ``-2/pi`` at ``s = pi/2``.
    """
    s = np.geomspace(lo, hi, n)
    v = np.exp(-1j * s) / (1j * s)
    i = np.flatnonzero(np.sign(v.imag[:-1]) * np.sign(v.imag[1:]) < 0)
    frac = v.imag[i] / (v.imag[i] - v.imag[i + 1])
    return v.real[i] + frac * (v.real[i + 1] - v.real[i])


def theta_grid(theta_min=THETA_MIN, theta_max=THETA_MAX, per_decade=POINTS_PER_DECADE) -> np.ndarray:
    """Sign-symmetric log grid: ``-theta_max .. -theta_min, theta_min .. theta_max``."""
    decades = math.log10(theta_max / theta_min)
    pos = np.geomspace(theta_min, theta_max, int(round(decades * per_decade)) + 1)
    return np.concatenate([-pos[::-1], pos])


def _track(eigs: np.ndarray) -> np.ndarray:
    """Reorder eigenvalues so each column follows one continuous locus."""
    out = eigs.copy()
    for i in range(1, len(out)):
        cost = np.abs(out[i - 1][:, None] - out[i][None, :])
        _, col = linear_sum_assignment(cost)
        out[i] = out[i][col]
    return out


@dataclass
class NyquistResult:
    theta: np.ndarray
    eigenvalues: np.ndarray
    crossings: np.ndarray
    min_crossing: float
    status: str
    k_bound: float
    max_jump: float
    continuous: bool
    tangencies: list = field(default_factory=list)

    @property
    def verdict(self) -> bool:
        return self.status == "pass"

    def to_csv(self, path) -> Path:
        """One row per grid point: ``theta, re_0, im_0, re_1, im_1, ...``."""
        path = Path(path)
        n = self.eigenvalues.shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["theta"] + [f"{part}_{k}" for k in range(n) for part in ("re", "im")])
            for th, row in zip(self.theta, self.eigenvalues):
                w.writerow([repr(float(th))] + [repr(float(v)) for z in row for v in (z.real, z.imag)])
        return path


def nyquist_check(lin: LinearizedModel, theta=None, margin: float = 0.0,
                  real_tol: float = 1e-9, jump_tol: float = 0.05) -> NyquistResult:
    """Sweep the eigenvalue loci of ``G(i theta)`` and locate real-axis crossings.

    Passes when every crossing lies right of ``-1 + margin``. Loci come in
    conjugate pairs over ``+/- theta`` so only the positive half is
    evaluated and the negative half mirrored. A locus whose imaginary part
    touches zero left of ``-1 + margin`` without changing sign is a
    tangency and makes the result inconclusive.
    """
    theta = theta_grid() if theta is None else np.asarray(theta, dtype=float)
    if np.any(theta == 0):
        raise ValueError("theta grid must exclude 0")
    pos = np.unique(np.abs(theta))
    eig = _track(np.linalg.eigvals(return_ratio(lin, pos)))

    scale = np.maximum(1.0, np.abs(eig))
    jumps = np.abs(np.diff(eig, axis=0)) / scale[1:]
    max_jump = float(jumps.max(initial=0.0))
    continuous = max_jump <= jump_tol

    re, im = eig.real, eig.imag
    on_axis = np.abs(im) <= real_tol * scale
    # loci pinned at 0 come from coordinates outside the loop (zero rows)
    structural = np.abs(eig) <= 1e-10 * np.abs(eig).max(axis=1, keepdims=True)
    cross = [re[on_axis & ~structural]]
    flip = (np.sign(im[:-1]) * np.sign(im[1:]) < 0) & ~on_axis[:-1] & ~on_axis[1:]
    i, k = np.nonzero(flip)
    frac = im[i, k] / (im[i, k] - im[i + 1, k])
    cross.append(re[i, k] + frac * (re[i + 1, k] - re[i, k]))
    crossings = np.concatenate(cross)
    floor = -1.0 + margin

    # near-misses: local minima of |Im| just off the axis, left of the threshold
    tangencies = []
    mag = np.abs(im) / scale
    if len(pos) >= 3:
        mid = (mag[1:-1] < mag[:-2]) & (mag[1:-1] <= mag[2:]) & (mag[1:-1] < 1e-3) & ~on_axis[1:-1]
        ti, tk = np.nonzero(mid)
        for a, b in zip(ti + 1, tk):
            if re[a, b] <= floor and not flip[a - 1:a + 1, b].any():
                tangencies.append((float(pos[a]), complex(eig[a, b])))

    min_cross = float(crossings.min()) if crossings.size else math.inf
    if crossings.size and min_cross <= floor:
        status = "fail"
    elif tangencies or not continuous:
        status = "inconclusive"
    else:
        status = "pass"
    full_theta = np.concatenate([-pos[::-1], pos])
    full_eig = np.concatenate([np.conj(eig[::-1]), eig])
    return NyquistResult(theta=full_theta, eigenvalues=full_eig, crossings=np.sort(crossings),
                         min_crossing=min_cross, status=status, k_bound=k_bound(lin),
                         max_jump=max_jump, continuous=continuous, tangencies=tangencies)
