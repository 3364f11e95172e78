import csv
from dataclasses import replace

import numpy as np
import pytest

from mpdual import harness
from mpdual.network import AlgorithmParams
from mpdual.scenario import load_scenario, parse_scenario

SINGLE_ROUTE = """
[scenario]
name = single
p = 2
gamma = 0.5
duration = 30

[gains]
kappa_link = 1
kappa_source = 0.3

[links]
l1  1  0.005
l2  3  0.005

[sources]
a  1  1
b  1  1

[routes]
ra  a  l1
rb  b  l2

[initial]
mu = 0.5
"""


def test_convergence_time():
    t = np.arange(100.0)
    x = np.where(t < 40, 2.0, 1.0)
    assert harness.convergence_time(t, x) == 40.0
    assert harness.convergence_time(t, np.ones(100)) == 0.0
    assert harness.convergence_time(t, np.sin(t) + 2.0) is None
    assert harness.convergence_time(t, np.full(100, np.nan)) is None


def test_lyapunov_violations():
    assert harness.lyapunov_violations([3.0, 2.0, 2.0, 1.0]) == 0
    assert harness.lyapunov_violations([3.0, 2.0, 2.5, 1.0]) == 1
    # increments inside the tolerance are ignored
    assert harness.lyapunov_violations([1.0, 1.0 + 1e-10]) == 0


def test_run_sl1():
    res = harness.run(load_scenario("sl1"))
    s = res.summary
    assert res.ok
    assert s["final"]["x"]["r1"] == pytest.approx(1.0, rel=0.005)
    assert s["lyapunov_violations"] == 0
    assert s["steps"] == 10000
    W = res.trace.column("W")
    assert np.all(np.diff(W) <= 1e-9 * (1 + np.abs(W[:-1])))
    assert res.trace.columns == ["t", "x.r1", "y.s1", "z.l1", "mu.l1", "nu.s1", "ybar.s1", "W"]


def test_trace_uniform_time():
    res = harness.run(load_scenario("asymmetric").with_overrides(duration=2.0))
    t = res.trace.column("t")
    np.testing.assert_allclose(np.diff(t), 0.005, rtol=1e-9)
    assert res.trace.data.shape == (401, 1 + 3 + 2 + 2 + 2 + 2 + 2 + 1)


def test_delayed_trace_has_no_w(tmp_path):
    res = harness.run(load_scenario("two_route").with_overrides(duration=0.5))
    assert "W" not in res.trace.columns
    assert res.ok
    path = res.trace.to_csv(tmp_path / "t.csv")
    with open(path) as fh:
        header = next(csv.reader(fh))
    assert header == res.trace.columns


def test_unstable_delayed_flagged():
    res = harness.run(load_scenario("sl1_unstable"))
    assert not res.ok
    assert res.summary["oscillating_links"] == ["l1"]


def test_divergent_run_keeps_partial_trace():
    sc = replace(load_scenario("sl1_delayed"), scalable=None, kappa_link=np.array([4000.0]),
                 kappa_source=np.array([20.0]), rho=np.array([80.0]), duration=5.0)
    res = harness.run(sc)
    s = res.summary
    assert s["failure"] is not None and 0 < s["failed_at"] < 5.0
    assert not res.ok
    assert len(res.trace.data) < 5001


@pytest.mark.parametrize("name", ["sl1", "two_route", "asymmetric"])
def test_deterministic(name):
    sc = load_scenario(name).with_overrides(duration=2.0)
    a, b = harness.run(sc), harness.run(sc)
    assert a.trace.data.tobytes() == b.trace.data.tobytes()


def test_sweep_gamma_asymmetric():
    sc = load_scenario("asymmetric").with_overrides(duration=20.0)
    rep = harness.sweep_gamma(sc, [0.8, 0.2, 0.6, 0.4, 1.0])
    assert rep.column("gamma") == [0.2, 0.4, 0.6, 0.8, 1.0]
    assert all(s == "ok" for s in rep.column("status"))
    assert all(v is not None for v in rep.column("kelly_optimum"))
    gaps = rep.column("oracle_gap")
    assert all(b >= a for a, b in zip(gaps, gaps[1:]))


def test_sweep_gamma_unit_point_has_no_source_price():
    sc = load_scenario("asymmetric").with_overrides(duration=5.0, params=AlgorithmParams(2.0, 1.0))
    res = harness.run(sc)
    assert set(res.summary["final"]["nu"].values()) == {0.0}


def test_sweep_gamma_single_route_gap_zero():
    sc = parse_scenario(SINGLE_ROUTE)
    rep = harness.sweep_gamma(sc, [0.2, 0.5, 1.0])
    for row in rep.rows:
        assert row["e_gamma"] == 1.0
        assert abs(row["oracle_gap"]) < 1e-6
        assert abs(row["gap"]) < 1e-3


def test_sweep_records_failures():
    sc = parse_scenario(SINGLE_ROUTE)
    rep = harness.sweep_gamma(sc, [0.0, 0.5])
    assert rep.rows[0]["status"].startswith("ValueError")
    assert rep.rows[1]["status"] == "ok"


def test_sweep_parallel_matches_serial():
    sc = parse_scenario(SINGLE_ROUTE).with_overrides(duration=2.0)
    a = harness.sweep_gamma(sc, [0.3, 0.7], workers=1)
    b = harness.sweep_gamma(sc, [0.3, 0.7], workers=2)
    assert a.rows == b.rows


def test_sweep_gains_delayed():
    sc = load_scenario("sl1_delayed").with_overrides(duration=10.0)
    rep = harness.sweep_gains(sc, [1.0, 5.0])
    assert rep.rows[0]["oscillating_links"] == ""
    assert rep.rows[0]["max_margin"] < 1.0
    assert rep.rows[1]["oscillating_links"] == "l1"
    assert rep.rows[1]["max_margin"] > 1.0


def test_sweep_gains_undelayed(tmp_path):
    sc = load_scenario("sl1").with_overrides(duration=20.0)
    rep = harness.sweep_gains(sc, [0.5, 1.0])
    assert [r["lyapunov_violations"] for r in rep.rows] == [0, 0]
    path = rep.to_csv(tmp_path / "g.csv")
    assert path.read_text().splitlines()[0].startswith("factor,status")


@pytest.mark.parametrize("name, verdict", [("sl1_delayed", True), ("sl1_unstable", False), ("triangle", True)])
def test_check(name, verdict):
    res = harness.check(load_scenario(name))
    assert res.verdict is verdict
    assert res.stability.verdict is verdict
    assert res.nyquist.verdict is verdict


def test_check_unstable_margin():
    res = harness.check(load_scenario("sl1_unstable"))
    assert res.stability.link[0] == pytest.approx(2.546, rel=1e-3)


def test_solve_and_json(tmp_path):
    sol = harness.solve(load_scenario("sl1"))
    assert sol["x"]["r1"] == pytest.approx(1.0)
    assert sol["kkt_residual"] < 1e-8
    path = harness.write_json(sol, tmp_path / "s.json")
    assert '"kelly_optimum"' in path.read_text()


def test_oracle_agreement_on_bundled_scenarios():
    from mpdual.scenario import bundled_scenarios
    for name in bundled_scenarios():
        sc = load_scenario(name)
        if name == "sl1_unstable":
            continue
        if name == "abilene":
            # the small Table II gains need longer than 50 s to settle every route
            sc = sc.with_overrides(duration=100.0)
        res = harness.run(sc)
        assert res.summary["oracle_rel_error"] < 0.005, name
