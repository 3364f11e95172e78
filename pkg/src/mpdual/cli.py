"""Command-line front end.

Exit status is 0 when the requested verdict passes, 1 when it fails and 2
on any error (bad scenario, solver failure, I/O).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from mpdual import harness
from mpdual.errors import MpdualError
from mpdual.nyquist import linearize, nyquist_check
from mpdual.oracle import solve_generalized_primal
from mpdual.scenario import bundled_scenarios, load_scenario

OUT_DIR_ENV = "MPDUAL_OUT_DIR"
DEFAULT_OUT_DIR = "mpdual-out"
EXIT_PASS, EXIT_FAIL, EXIT_ERROR = 0, 1, 2

log = logging.getLogger("mpdual")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", required=True,
                        help="scenario file, or the name of a bundled scenario")
    common.add_argument("--out-dir", default=None,
                        help=f"output directory (default: ${OUT_DIR_ENV} or ./{DEFAULT_OUT_DIR})")
    common.add_argument("--dt", type=float, default=None, help="override the time step [s]")
    common.add_argument("--duration", type=float, default=None, help="override the horizon [s]")
    common.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="mpdual", description="Multipath dual congestion control: simulation and analysis.")
    parser.add_argument("--list", action="store_true", help="list bundled scenarios and exit")
    sub = parser.add_subparsers(dest="command")
    sub.add_parser("run", parents=[common], help="simulate a scenario, write trace and summary")
    p = sub.add_parser("sweep-gamma", parents=[common], help="equilibrium and gap per gamma")
    p.add_argument("--gammas", type=_floats, default=[0.2, 0.4, 0.6, 0.8, 1.0])
    p.add_argument("--workers", type=int, default=1)
    p = sub.add_parser("sweep-gains", parents=[common], help="convergence per gain multiplier")
    p.add_argument("--factors", type=_floats, default=[0.25, 0.5, 1.0, 2.0, 4.0])
    p.add_argument("--workers", type=int, default=1)
    sub.add_parser("check", parents=[common], help="delay margins and Nyquist test")
    sub.add_parser("solve", parents=[common], help="oracle solution only")
    sub.add_parser("nyquist", parents=[common], help="eigenvalue loci of the return ratio")
    return parser


def out_dir(arg: str | None) -> Path:
    path = Path(arg or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _scenario(args):
    sc = load_scenario(args.scenario)
    return sc.with_overrides(dt=args.dt, duration=args.duration, seed=args.seed)


def cmd_run(args, sc, out: Path) -> int:
    res = harness.run(sc)
    res.trace.to_csv(out / f"{sc.name}_trace.csv")
    harness.write_json(res.summary, out / f"{sc.name}_summary.json")
    s = res.summary
    if s["failure"]:
        print(f"{sc.name}: {s['failure']} at t = {s['failed_at']:.6g} s "
              f"(partial trace kept, {s['steps']} steps)")
    else:
        print(f"{sc.name}: convergence_time = {s['convergence_time']}  "
              f"clamp_events = {s['clamp_events']}")
    if s.get("lyapunov_violations"):
        print(f"  W increased on {s['lyapunov_violations']} steps")
    if s.get("oscillating_links"):
        print(f"  oscillating links: {' '.join(s['oscillating_links'])}")
    print("PASS" if res.ok else "FAIL")
    return EXIT_PASS if res.ok else EXIT_FAIL


def _print_rows(report, keys):
    print("  ".join(f"{k:>16}" for k in keys))
    for row in report.rows:
        cells = []
        for k in keys:
            v = row.get(k)
            cells.append(f"{v:>16.6g}" if isinstance(v, float) else f"{str(v):>16}")
        print("  ".join(cells))


def cmd_sweep_gamma(args, sc, out: Path) -> int:
    bad = [g for g in args.gammas if not 0.0 < g <= 1.0]
    if bad:
        raise MpdualError(f"gamma values must lie in (0, 1]: {bad}")
    report = harness.sweep_gamma(sc, args.gammas, args.workers)
    report.to_csv(out / f"{sc.name}_sweep_gamma.csv")
    _print_rows(report, ["gamma", "status", "utility", "kelly_optimum", "gap", "oracle_gap",
                         "convergence_time"])
    ok = all(r["status"] == "ok" for r in report.rows)
    print("PASS" if ok else "FAIL")
    return EXIT_PASS if ok else EXIT_FAIL


def cmd_sweep_gains(args, sc, out: Path) -> int:
    report = harness.sweep_gains(sc, args.factors, args.workers)
    report.to_csv(out / f"{sc.name}_sweep_gains.csv")
    keys = ["factor", "status", "convergence_time", "oracle_rel_error"]
    keys += ["max_margin", "oscillating_links"] if sc.mode == "delayed" else ["lyapunov_violations"]
    _print_rows(report, keys)
    # a gain sweep maps the stable region; it has no single verdict
    return EXIT_PASS


def cmd_check(args, sc, out: Path) -> int:
    res = harness.check(sc)
    st, ny = res.stability, res.nyquist
    ny.to_csv(out / f"{sc.name}_loci.csv")
    report = {
        "scenario": sc.name,
        "gains": {"kappa_link": res.gains.kappa_link, "kappa_source": res.gains.kappa_source,
                  "rho": res.gains.rho},
        "margins": {"link": st.link, "source_kappa": st.source_kappa, "source_rho": st.source_rho},
        "almost_saturated": st.almost_saturated,
        "stability_verdict": st.verdict,
        "nyquist": {"status": ny.status, "min_crossing": ny.min_crossing, "k_bound": ny.k_bound,
                    "continuous": ny.continuous},
        "verdict": res.verdict,
    }
    harness.write_json(report, out / f"{sc.name}_check.json")
    print(f"{sc.name}: worst margin {st.worst:.4g} ({'pass' if st.verdict else 'fail'}), "
          f"Nyquist {ny.status}, leftmost crossing {ny.min_crossing:.4g}, K = {ny.k_bound:.4g}")
    print("PASS" if res.verdict else "FAIL")
    return EXIT_PASS if res.verdict else EXIT_FAIL


def cmd_solve(args, sc, out: Path) -> int:
    sol = harness.solve(sc)
    harness.write_json(sol, out / f"{sc.name}_solution.json")
    print(f"{sc.name}: objective {sol['objective']:.10g}, KKT residual {sol['kkt_residual']:.3g}, "
          f"proportionally fair optimum {sol['kelly_optimum']:.10g}")
    for r, v in sol["x"].items():
        print(f"  x.{r} = {v:.10g}")
    return EXIT_PASS


def cmd_nyquist(args, sc, out: Path) -> int:
    eq = solve_generalized_primal(sc.model, sc.params)
    lin = linearize(sc.model, sc.params, harness.delayed_gains(sc, eq), eq)
    ny = nyquist_check(lin)
    ny.to_csv(out / f"{sc.name}_loci.csv")
    harness.write_json({"scenario": sc.name, "status": ny.status, "min_crossing": ny.min_crossing,
                        "crossings": np.sort(ny.crossings), "k_bound": ny.k_bound,
                        "max_jump": ny.max_jump, "continuous": ny.continuous,
                        "tangencies": ny.tangencies}, out / f"{sc.name}_nyquist.json")
    print(f"{sc.name}: {ny.status}, {len(ny.crossings)} real-axis crossings, leftmost "
          f"{ny.min_crossing:.4g}, K = {ny.k_bound:.4g}")
    return EXIT_PASS if ny.verdict else EXIT_FAIL


COMMANDS = {
    "run": cmd_run,
    "sweep-gamma": cmd_sweep_gamma,
    "sweep-gains": cmd_sweep_gains,
    "check": cmd_check,
    "solve": cmd_solve,
    "nyquist": cmd_nyquist,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PASS if exc.code == 0 else EXIT_ERROR
    if args.list:
        print("\n".join(bundled_scenarios()))
        return EXIT_PASS
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        sc = _scenario(args)
        return COMMANDS[args.command](args, sc, out_dir(args.out_dir))
    except (MpdualError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
