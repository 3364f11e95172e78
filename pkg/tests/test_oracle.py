import numpy as np
import pytest

from mpdual import instances
from mpdual.dual import GainFunctions, dual_objective, initial_state, simulate_undelayed
from mpdual.errors import NonConvergence
from mpdual.network import AlgorithmParams, Link, Source, build_network, route_from_path
from mpdual.oracle import (approx_error_factor, kkt_residual, solve_generalized_primal,
                           solve_kelly_primal, verify_lemma1)


def test_sl1_solution(sl1, params):
    sol = solve_generalized_primal(sl1, params, tol=1e-6)
    np.testing.assert_allclose([sol.x[0], sol.y[0], sol.u[0]], 1.0, atol=1e-6)
    np.testing.assert_allclose([sol.mu[0], sol.nu[0]], [1.0, 0.5], atol=1e-6)
    assert sol.residual.max < 1e-6


def test_two_route_solution(two_route, params, two_route_eq):
    sol = solve_generalized_primal(two_route, params)
    np.testing.assert_allclose(sol.x, two_route_eq["x"], rtol=1e-3)
    assert sol.y[0] == pytest.approx(2.0, rel=1e-3)
    assert sol.ybar[0] == pytest.approx(2.9142, rel=1e-3)
    np.testing.assert_allclose(sol.nu, two_route_eq["nu"], rtol=1e-6)


@pytest.mark.parametrize("make", [instances.single_link, instances.two_route, instances.asymmetric,
                                  instances.triangle, instances.abilene])
def test_solution_invariants(make, params):
    m = make()
    sol = solve_generalized_primal(m, params)
    q = params.q
    assert sol.residual.max < 1e-8
    assert np.all(sol.x >= 0)
    assert np.all(m.routing_matrix @ sol.x <= m.capacity + 1e-9)
    np.testing.assert_allclose(sol.y, m.source_matrix @ sol.x)
    blend = params.gamma * (m.source_matrix @ sol.x ** (1 / q)) + (1 - params.gamma) * sol.y ** (1 / q)
    assert np.all(sol.u <= blend + 1e-12)


def test_tighter_tol_never_worse(triangle, params):
    loose = solve_generalized_primal(triangle, params, tol=1e-5)
    tight = solve_generalized_primal(triangle, params, tol=1e-6)
    assert tight.residual.max <= loose.residual.max


def test_gamma_range(sl1):
    with pytest.raises(ValueError):
        solve_generalized_primal(sl1, AlgorithmParams(2.0, 0.0))
    with pytest.raises(ValueError):
        solve_generalized_primal(sl1, AlgorithmParams(), tol=0.0)


def test_nonconvergence_reports_residual(triangle, params):
    with pytest.raises(NonConvergence) as info:
        solve_generalized_primal(triangle, params, tol=1e-30, max_outer=3)
    assert np.isfinite(info.value.residual)


def test_unit_gamma(sl1):
    sol = solve_generalized_primal(sl1, AlgorithmParams(2.0, 1.0))
    assert sol.x[0] == pytest.approx(1.0, rel=1e-8)
    assert sol.nu[0] == pytest.approx(0.0, abs=1e-12)


def test_kelly_examples(sl1, two_route):
    assert solve_kelly_primal(sl1).objective == pytest.approx(0.0, abs=1e-6)
    assert solve_kelly_primal(sl1).x[0] == pytest.approx(1.0, abs=1e-6)
    assert solve_kelly_primal(two_route).objective == pytest.approx(np.log(2.0), abs=1e-6)
    shared = build_network([Link("l1", 1.0)],
                           [route_from_path("r1", "s1", ["l1"], [0.0]),
                            route_from_path("r2", "s1", ["l1"], [0.0])],
                           [Source("s1", ("r1", "r2"))])
    assert solve_kelly_primal(shared).objective == pytest.approx(0.0, abs=1e-6)


def test_kkt_closed_form(sl1, params):
    res = kkt_residual(sl1, params, [1.0], [1.0], [1.0], [1.0], [0.5])
    assert res.max < 1e-10
    assert res.eta_over_q[0] == pytest.approx(1.0)


def test_kkt_perturbed(sl1, params):
    res = kkt_residual(sl1, params, [1.0], [1.0], [1.0], [1.1], [0.5])
    assert abs(res.route_stationarity[0]) >= 0.09
    assert res.as_dict()["route_stationarity"] == pytest.approx(0.1)


def test_kkt_reports_violations(sl1, params):
    res = kkt_residual(sl1, params, [1.2], [1.2], [1.2 ** 0.5], [-0.1], [0.5])
    d = res.as_dict()
    assert d["capacity_violation"] == pytest.approx(0.2)
    assert d["dual_violation"] == pytest.approx(0.1)


def test_dynamics_fixed_point_certified(two_route, params):
    run = simulate_undelayed(two_route, params, GainFunctions(1.0, 0.3),
                             initial_state(two_route, params, 0.3), 0.005, 50.0)
    x, y, ybar = run.x[-1], run.y[-1], run.ybar[-1]
    res = kkt_residual(two_route, params, x, two_route.source_matrix @ x, ybar ** (1 / params.q),
                       run.mu[-1], run.nu[-1])
    assert res.max < 1e-6


def test_strong_duality(triangle, params):
    sol = solve_generalized_primal(triangle, params)
    assert dual_objective(triangle, params, sol.mu + 0.0, sol.nu) == pytest.approx(sol.objective, abs=1e-6)


def test_error_factor_examples():
    assert approx_error_factor(0.0, 2.0, 2) == 1.0
    assert approx_error_factor(1.0, 2.0, 2) == pytest.approx(2.0)
    assert approx_error_factor(0.5, 2.0, 2) == pytest.approx((1 + 0.5 * (np.sqrt(2) - 1)) ** 2)
    assert approx_error_factor(0.5, 2.0, 2) == pytest.approx(1.4571, abs=1e-4)
    np.testing.assert_allclose(approx_error_factor(0.7, 3.0, [1, 1]), 1.0)


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_error_factor_monotone(p, n):
    e = np.array([approx_error_factor(g, p, n) for g in np.linspace(0, 1, 101)])
    assert np.all(np.diff(e) >= 0)
    assert e[0] == 1.0
    assert e[-1] == pytest.approx(n ** (1 / (p - 1)), rel=1e-14)
    assert np.all((e >= 1) & (e <= n ** (1 / (p - 1)) * (1 + 1e-14)))


def test_error_factor_bad_input():
    for args in ((-0.1, 2.0, 1), (0.5, 1.0, 1), (0.5, 2.0, 0)):
        with pytest.raises(ValueError):
            approx_error_factor(*args)


def test_lemma1_sl1_tight(sl1, params):
    rep = verify_lemma1(sl1, params)
    assert rep.passed
    assert rep.bound.lower_slack == pytest.approx(0.0, abs=1e-6)
    assert rep.bound.upper_slack == pytest.approx(0.0, abs=1e-6)


def test_lemma1_two_route(two_route, params):
    rep = verify_lemma1(two_route, params)
    assert rep.passed
    assert rep.bound.kelly_value == pytest.approx(np.log(2), abs=1e-6)
    assert rep.bound.generalized_value == pytest.approx(np.log(2), abs=1e-6)


def test_lemma1_random():
    rng = np.random.default_rng(7)
    for _ in range(5):
        m = instances.random_instance(rng)
        assert verify_lemma1(m, AlgorithmParams(2.0, float(rng.uniform(0.05, 1.0)))).passed
