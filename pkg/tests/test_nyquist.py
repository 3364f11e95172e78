import math

import numpy as np
import pytest

from mpdual import instances
from mpdual.delayed import (DelayGains, check_stability_conditions, initial_delayed_state,
                            oscillating_links, scalable_gains, simulate_delayed)
from mpdual.errors import AlmostSaturatedLink
from mpdual.network import AlgorithmParams
from mpdual.nyquist import (TWO_OVER_PI, delay_kernel_axis_crossings, delay_kernel_min,
                            factorized_return_ratio, k_bound, linearize, nyquist_check,
                            return_ratio, return_ratio_composed, theta_grid)
from mpdual.oracle import solve_generalized_primal


def _lin(model, params, kappa=0.4, scale=1.0):
    eq = solve_generalized_primal(model, params)
    gains = scalable_gains(model, params, eq.x, kappa).scaled(scale, scale, scale)
    return linearize(model, params, gains, eq), eq, gains


@pytest.fixture
def sl1_lin(sl1, params):
    return _lin(sl1, params)[0]


def test_sl1_coefficients(sl1_lin):
    assert sl1_lin.a[0] == pytest.approx(0.5)
    assert sl1_lin.sigma[0] == pytest.approx(sl1_lin.gains.rho[0] / 2)
    assert sl1_lin.inv_gap[0] == pytest.approx(2.0)
    assert sl1_lin.size == 3
    assert sl1_lin.curvature_b()[0] < 0


def test_a_positive_on_random_equilibria():
    rng = np.random.default_rng(11)
    for _ in range(20):
        m = instances.random_instance(rng)
        params = AlgorithmParams(float(rng.uniform(1.5, 3.0)), float(rng.uniform(0.1, 0.9)))
        eq = solve_generalized_primal(m, params)
        # zero-price links that happen to sit at capacity cannot be linearized
        try:
            lin = linearize(m, params, DelayGains(1.0, 1.0, 1.0), eq)
        except AlmostSaturatedLink:
            continue
        assert np.all(lin.a > 0)


def test_almost_saturated_rejected(sl1, params):
    class Eq:
        x = np.array([1.0])
        mu = np.array([0.0])
        nu = np.array([0.5])
        ybar = np.array([1.0])
    with pytest.raises(AlmostSaturatedLink):
        linearize(sl1, params, DelayGains(1.0, 1.0, 1.0), Eq)


def test_decay(sl1_lin):
    theta = np.geomspace(1e4, 1e10, 13)
    norms = np.linalg.norm(return_ratio(sl1_lin, theta), axis=(1, 2))
    # every entry decays like 1/theta
    envelope = theta * norms
    assert envelope.max() < 2.0 * envelope.min()
    assert norms[-1] < 1e-6
    assert np.all(np.diff(norms[::2]) < 0)


def test_conjugate_symmetry(sl1_lin):
    np.testing.assert_allclose(return_ratio(sl1_lin, -3.0), np.conj(return_ratio(sl1_lin, 3.0)), rtol=1e-14)


def test_vectorized_matches_scalar(sl1_lin):
    th = np.array([0.1, 1.0, 30.0])
    stack = return_ratio(sl1_lin, th)
    for k, t in enumerate(th):
        np.testing.assert_array_equal(stack[k], return_ratio(sl1_lin, t))


@pytest.mark.parametrize("make", [instances.single_link, instances.two_route, instances.asymmetric,
                                  instances.triangle])
@pytest.mark.parametrize("theta", [0.01, 1.0, 57.0, 900.0])
def test_constructions_agree(make, params, theta):
    lin = _lin(make(), params)[0]
    G = return_ratio(lin, theta)
    scale = np.abs(G).max()
    np.testing.assert_allclose(return_ratio_composed(lin, theta), G, atol=1e-12 * scale)
    if lin.active.all():
        np.testing.assert_allclose(factorized_return_ratio(lin, theta), G, atol=1e-10 * scale)


def test_sl1_eigenvalues_at_one(sl1_lin):
    ev = np.linalg.eigvals(return_ratio(sl1_lin, 1.0))
    assert ev.shape == (3,)
    assert np.all(np.isfinite(ev))


def test_kernel_values():
    s = np.geomspace(1e-3, 1e3, 1001)
    np.testing.assert_allclose(np.real(np.exp(-1j * s) / (1j * s)), -np.sin(s) / s, atol=1e-12)
    crossings = delay_kernel_axis_crossings()
    assert crossings.min() == pytest.approx(-TWO_OVER_PI, abs=1e-6)
    assert np.all(crossings >= -TWO_OVER_PI - 1e-6)
    # the real part itself dips toward -1 as s -> 0
    value, where = delay_kernel_min()
    assert value < -TWO_OVER_PI and where == pytest.approx(1e-3)


def test_grid():
    th = theta_grid()
    assert len(th) == 2 * (8 * 2000 + 1)
    np.testing.assert_array_equal(th, -th[::-1])
    assert th[th > 0].min() == pytest.approx(1e-4)


@pytest.mark.parametrize("make", [instances.single_link, instances.two_route, instances.asymmetric])
def test_compliant_gains_pass(make, params):
    lin, eq, gains = _lin(make(), params)
    res = nyquist_check(lin, theta_grid(per_decade=400))
    assert res.verdict
    assert res.min_crossing > -1.0
    assert res.continuous
    assert res.eigenvalues.shape[1] == lin.size
    assert res.k_bound < math.pi / 2
    assert check_stability_conditions(lin.model, params, gains, eq).verdict


def test_hundredfold_gains_fail(sl1, params):
    lin = _lin(sl1, params, scale=100.0)[0]
    res = nyquist_check(lin, theta_grid(per_decade=400))
    assert not res.verdict
    assert res.min_crossing <= -1.0


def test_k_bound_dominates_every_frequency(params):
    from mpdual.network import utility_prime
    from mpdual.nyquist import factorization
    lin = _lin(instances.triangle(), params)[0]
    k = k_bound(lin)
    assert k < math.pi / 2
    g = lin.gains
    up = utility_prime(lin.ybar, lin.model.weight, lin.model.alpha)
    Q = np.concatenate([np.sqrt(lin.ybar ** (1 / params.p) * up / (g.rho * lin.a)),
                        np.sqrt(lin.nu / g.kappa_source), np.sqrt(lin.mu / g.kappa_link)])
    keep = np.concatenate([np.ones(2 * lin.model.S, bool), lin.active])
    Q = Q[keep]
    for theta in np.geomspace(1e-3, 1e3, 25):
        Rm = factorization(lin, theta)["R_plus"][:, keep]
        M = (Rm.conj().T @ Rm) * Q[None, :] / Q[:, None]
        assert np.abs(M).sum(axis=1).max() <= k * (1 + 1e-12)


def test_loci_csv(sl1_lin, tmp_path):
    res = nyquist_check(sl1_lin, theta_grid(1e-2, 1e2, 50))
    path = res.to_csv(tmp_path / "loci.csv")
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (len(res.theta), 1 + 2 * 3)
    np.testing.assert_array_equal(data[:, 0], res.theta)


def test_coarse_grid_flags_discontinuity(params):
    lin = _lin(instances.triangle(), params)[0]
    res = nyquist_check(lin, theta_grid(1e-4, 1e4, 2))
    assert not res.continuous
    assert res.status in ("inconclusive", "fail")


def test_zero_theta_rejected(sl1_lin):
    with pytest.raises(ValueError):
        nyquist_check(sl1_lin, np.array([0.0, 1.0]))


@pytest.mark.parametrize("make", [instances.single_link, instances.two_route, instances.triangle])
def test_pass_implies_convergence(make, params):
    m = make()
    lin, eq, gains = _lin(m, params)
    assert nyquist_check(lin, theta_grid(per_decade=200)).verdict
    rng = np.random.default_rng(5)
    mu = eq.mu * (1 + 0.05 * rng.uniform(-1, 1, m.J)) + 0.05 * eq.mu.max() * (eq.mu == 0)
    st = initial_delayed_state(m, params, mu, eq.nu * (1 + 0.05 * rng.uniform(-1, 1, m.S)))
    run = simulate_delayed(m, params, gains, st, 0.001, 20.0)
    assert run.failure is None
    assert oscillating_links(m, run.z[:-1]) == []
    np.testing.assert_allclose(run.x[-2], eq.x, rtol=0.01)
