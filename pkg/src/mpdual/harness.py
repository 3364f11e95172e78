"""Experiment orchestration: runs, sweeps, stability checks and their reports."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from mpdual.delayed import (DelayGains, StabilityReport, check_stability_conditions,
                            initial_delayed_state, oscillating_links, scalable_gains,
                            simulate_delayed)
from mpdual.dual import GainFunctions, PriceState, initial_state, simulate_undelayed
from mpdual.errors import NonConvergence, ScenarioError
from mpdual.network import AlgorithmParams, utility
from mpdual.nyquist import NyquistResult, linearize, nyquist_check, theta_grid
from mpdual.oracle import (PrimalSolution, approx_error_factor, solve_generalized_primal,
                           solve_kelly_primal)
from mpdual.scenario import Scenario

log = logging.getLogger(__name__)

BAND = 0.01
FINAL_WINDOW = 0.1
LYAPUNOV_TOL = 1e-9


@dataclass
class Trace:
    columns: list[str]
    data: np.ndarray

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.data:
                w.writerow([repr(float(v)) for v in row])
        return path


@dataclass
class RunResult:
    scenario: Scenario
    trace: Trace
    summary: dict

    @property
    def ok(self) -> bool:
        s = self.summary
        return (s["failure"] is None and s["convergence_time"] is not None
                and not s.get("lyapunov_violations") and not s.get("oscillating_links"))


@dataclass
class SweepReport:
    parameter: str
    rows: list[dict] = field(default_factory=list)

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]

    def to_csv(self, path) -> Path:
        path = Path(path)
        keys = []
        for r in self.rows:
            keys.extend(k for k in r if k not in keys)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(v) for k, v in r.items()})
        return path


@dataclass
class CheckResult:
    stability: StabilityReport
    nyquist: NyquistResult
    gains: DelayGains
    equilibrium: PrimalSolution

    @property
    def verdict(self) -> bool:
        return self.stability.verdict and self.nyquist.verdict


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def convergence_time(times, series, band=BAND, window=FINAL_WINDOW):
    """First time after which every column stays within ``band`` of its final-window mean.

    Returns ``None`` when the last sample is itself outside the band.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim == 1:
        series = series[:, None]
    n = len(series)
    if n == 0 or np.isnan(series).any():
        return None
    ref = series[max(0, n - max(1, int(round(window * n)))):].mean(axis=0)
    outside = np.any(np.abs(series - ref) > band * np.abs(ref), axis=1)
    if outside[-1]:
        return None
    bad = np.flatnonzero(outside)
    return float(times[0] if bad.size == 0 else times[bad[-1] + 1])


def lyapunov_violations(W, tol=LYAPUNOV_TOL) -> int:
    """Steps where ``W`` increases by more than ``tol * (1 + |W|)``."""
    W = np.asarray(W, dtype=float)
    return int(np.count_nonzero(np.diff(W) > tol * (1.0 + np.abs(W[:-1]))))


def undelayed_gains(sc: Scenario) -> GainFunctions:
    return GainFunctions(1.0 if sc.kappa_link is None else sc.kappa_link,
                         1.0 if sc.kappa_source is None else sc.kappa_source)


def delayed_gains(sc: Scenario, equilibrium: PrimalSolution) -> DelayGains:
    """Scalable gains when ``scalable`` is set, else the explicit constants."""
    if sc.scalable is not None:
        return scalable_gains(sc.model, sc.params, equilibrium.x, sc.scalable, sc.max_rate)
    missing = [k for k in ("kappa_link", "kappa_source", "rho") if getattr(sc, k) is None]
    if missing:
        raise ScenarioError(f"{sc.name}: delayed gains need 'scalable' or all of {missing}", missing)
    return DelayGains(sc.kappa_link, sc.kappa_source, sc.rho)


def perturbed_prices(sc: Scenario, eq: PrimalSolution, rng: np.random.Generator):
    """Equilibrium prices scaled by ``1 + perturb * U(-1, 1)``.

    Zero-price links start at a small positive price so they are interior.
    """
    d = sc.perturb
    mu = eq.mu * (1.0 + d * rng.uniform(-1.0, 1.0, sc.model.J))
    pos = eq.mu[eq.mu > 0]
    floor = d * (pos.mean() if pos.size else 1.0)
    mu = np.where(eq.mu > 0, mu, floor * rng.uniform(0.0, 1.0, sc.model.J))
    nu = eq.nu * (1.0 + d * rng.uniform(-1.0, 1.0, sc.model.S))
    return mu, nu


def start_prices(sc: Scenario, eq: PrimalSolution | None = None):
    rng = np.random.default_rng(sc.seed)
    if sc.perturb > 0:
        if eq is None:
            eq = solve_generalized_primal(sc.model, sc.params)
        return perturbed_prices(sc, eq, rng)
    st = initial_state(sc.model, sc.params, 0.01 if sc.mu0 is None else sc.mu0, sc.nu_fraction)
    return st.mu, (st.nu if sc.nu0 is None else sc.nu0)


def _ids(items):
    return [i.id for i in items]


def _trace(sc: Scenario, run, with_w: bool) -> Trace:
    m = sc.model
    cols = ["t"]
    blocks = [run.times[:, None]]
    for key, ids in (("x", _ids(m.routes)), ("y", _ids(m.sources)), ("z", _ids(m.links)),
                     ("mu", _ids(m.links)), ("nu", _ids(m.sources)), ("ybar", _ids(m.sources))):
        cols.extend(f"{key}.{i}" for i in ids)
        blocks.append(getattr(run, key))
    if with_w:
        cols.append("W")
        blocks.append(run.W[:, None])
    return Trace(cols, np.hstack(blocks))


def run(sc: Scenario, oracle: bool = True) -> RunResult:
    """Integrate the scenario and summarize the outcome.

    A failed run keeps its partial trace; the failure and its time are in
    the summary.
    """
    m = sc.model
    eq = None
    if oracle or sc.perturb > 0 or sc.mode == "delayed":
        try:
            eq = solve_generalized_primal(m, sc.params)
        except (NonConvergence, ValueError, np.linalg.LinAlgError) as exc:
            # the run itself does not need the oracle
            log.warning("oracle failed on %s: %s", sc.name, exc)
            if sc.perturb > 0 or (sc.mode == "delayed" and sc.scalable is not None):
                raise
    mu, nu = start_prices(sc, eq)
    summary = {"scenario": sc.name, "mode": sc.mode, "gamma": sc.params.gamma, "p": sc.params.p,
               "dt": sc.dt, "duration": sc.duration, "seed": sc.seed}
    if sc.mode == "undelayed":
        res = simulate_undelayed(m, sc.params, undelayed_gains(sc), PriceState(mu, nu),
                                 sc.dt, sc.duration)
        trace = _trace(sc, res, True)
        summary["lyapunov_violations"] = lyapunov_violations(res.W)
        rows = slice(None)
    else:
        gains = delayed_gains(sc, eq)
        state = initial_delayed_state(m, sc.params, mu, nu)
        res = simulate_delayed(m, sc.params, gains, state, sc.dt, sc.duration)
        trace = _trace(sc, res, False)
        # the last row of a delayed trace carries prices only
        rows = slice(0, -1)
        summary["oscillating_links"] = [m.links[j].id for j in oscillating_links(m, res.z[rows])] \
            if len(res.z) > 4 else []
    x = res.x[rows]
    ok_rows = ~np.isnan(x).any(axis=1)
    times, x = res.times[rows][ok_rows], x[ok_rows]
    summary.update({
        "steps": int(len(res.times) - 1),
        "failure": res.failure,
        "failed_at": res.failed_at,
        "clamp_events": int(res.clamp_events),
        "convergence_time": convergence_time(times, x) if res.failure is None else None,
    })
    if len(x):
        last = len(x) - 1
        summary["final"] = {
            "x": dict(zip(_ids(m.routes), map(float, x[last]))),
            "y": dict(zip(_ids(m.sources), map(float, res.y[rows][ok_rows][last]))),
            "mu": dict(zip(_ids(m.links), map(float, res.mu[rows][ok_rows][last]))),
            "nu": dict(zip(_ids(m.sources), map(float, res.nu[rows][ok_rows][last]))),
        }
        if eq is not None:
            summary["oracle_rel_error"] = float(np.max(np.abs(x[last] / eq.x - 1.0)))
    return RunResult(sc, trace, summary)


def _map(fn, items, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _gamma_point(args):
    sc, gamma = args
    row = {"gamma": gamma}
    try:
        params = AlgorithmParams(sc.params.p, gamma)
        scg = replace(sc, params=params)
        m = sc.model
        kelly = solve_kelly_primal(m)
        gen = solve_generalized_primal(m, params)
        res = run(scg, oracle=False)
        agg = m.source_matrix @ np.array(list(res.summary["final"]["x"].values()))
        row.update({
            "status": "ok" if res.summary["failure"] is None else res.summary["failure"],
            "aggregate_rate": float(agg.sum()),
            "utility": float(np.sum(utility(agg, m.weight, m.alpha))),
            "oracle_utility": float(np.sum(utility(m.source_matrix @ gen.x, m.weight, m.alpha))),
            "kelly_optimum": kelly.objective,
            "e_gamma": float(np.max(approx_error_factor(gamma, params.p, m.routes_per_source))),
            "convergence_time": res.summary["convergence_time"],
        })
        row["gap"] = row["kelly_optimum"] - row["utility"]
        row["oracle_gap"] = row["kelly_optimum"] - row["oracle_utility"]
    except Exception as exc:
        row["status"] = f"{type(exc).__name__}: {exc}"
    return row


def sweep_gamma(sc: Scenario, gammas, workers: int = 1) -> SweepReport:
    """Per-gamma dynamics equilibrium, the proportionally fair optimum and the gap between them.

    ``gap`` uses the simulated rates; ``oracle_gap`` the generalized
    problem's exact optimum. Failures are recorded per point.
    """
    gammas = sorted(float(g) for g in gammas)
    rows = _map(_gamma_point, [(sc, g) for g in gammas], workers)
    return SweepReport("gamma", rows)


def _gain_point(args):
    sc, factor = args
    row = {"factor": factor}
    try:
        eq = solve_generalized_primal(sc.model, sc.params)
        if sc.mode == "delayed":
            g = delayed_gains(sc, eq).scaled(factor, factor, factor)
            scf = replace(sc, scalable=None, kappa_link=g.kappa_link, kappa_source=g.kappa_source,
                          rho=g.rho)
            row["max_margin"] = check_stability_conditions(sc.model, sc.params, g, eq).worst
        else:
            base = undelayed_gains(sc)
            scf = replace(sc, kappa_link=np.broadcast_to(base.kappa_link, (sc.model.J,)) * factor,
                          kappa_source=np.broadcast_to(base.kappa_source, (sc.model.S,)) * factor)
        res = run(scf)
        s = res.summary
        row.update({
            "status": "ok" if s["failure"] is None else s["failure"],
            "convergence_time": s["convergence_time"],
            "oracle_rel_error": s.get("oracle_rel_error"),
            "clamp_events": s["clamp_events"],
        })
        if "lyapunov_violations" in s:
            row["lyapunov_violations"] = s["lyapunov_violations"]
        if "oscillating_links" in s:
            row["oscillating_links"] = " ".join(s["oscillating_links"])
    except Exception as exc:
        row["status"] = f"{type(exc).__name__}: {exc}"
    return row


def sweep_gains(sc: Scenario, factors, workers: int = 1) -> SweepReport:
    """Scale every gain by each factor and report convergence and margins."""
    rows = _map(_gain_point, [(sc, float(f)) for f in factors], workers)
    return SweepReport("factor", rows)


def check(sc: Scenario, theta=None) -> CheckResult:
    """Delay-stability margins and the Nyquist locus test at the oracle equilibrium."""
    eq = solve_generalized_primal(sc.model, sc.params)
    gains = delayed_gains(sc, eq)
    report = check_stability_conditions(sc.model, sc.params, gains, eq)
    lin = linearize(sc.model, sc.params, gains, eq)
    nyq = nyquist_check(lin, theta_grid() if theta is None else theta)
    return CheckResult(report, nyq, gains, eq)


def solve(sc: Scenario) -> dict:
    """Oracle solutions of both problems and the approximation bound."""
    m = sc.model
    gen = solve_generalized_primal(m, sc.params)
    kel = solve_kelly_primal(m)
    e = np.atleast_1d(approx_error_factor(sc.params.gamma, sc.params.p, m.routes_per_source))
    y = m.source_matrix @ gen.x
    return {
        "scenario": sc.name,
        "x": dict(zip(_ids(m.routes), map(float, gen.x))),
        "y": dict(zip(_ids(m.sources), map(float, y))),
        "ybar": dict(zip(_ids(m.sources), map(float, gen.ybar))),
        "mu": dict(zip(_ids(m.links), map(float, gen.mu))),
        "nu": dict(zip(_ids(m.sources), map(float, gen.nu))),
        "objective": gen.objective,
        "kkt_residual": gen.residual.max,
        "utility_at_solution": float(np.sum(utility(y, m.weight, m.alpha))),
        "kelly_optimum": kel.objective,
        "e_gamma": dict(zip(_ids(m.sources), map(float, e))),
    }


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")
