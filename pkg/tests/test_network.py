import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpdual import instances
from mpdual.errors import NetworkError
from mpdual.network import (AlgorithmParams, Hop, Link, Route, Source, build_network,
                            check_assumption_h, demand, route_from_path, utility, utility_prime)


def test_single_route_matrix(sl1):
    np.testing.assert_array_equal(sl1.routing_matrix, [[1.0]])


def test_disjoint_routes_identity(two_route):
    np.testing.assert_array_equal(two_route.routing_matrix, np.eye(2))


def test_triangle_structure(triangle):
    assert triangle.J == 6
    assert triangle.S == 3
    assert np.all(triangle.routes_per_source >= 2)
    np.testing.assert_allclose(triangle.capacity, 100.0)
    # 1->2 direct and 1->2 via 3
    paths = {r.link_ids for r in triangle.routes if r.source_id == "p12"}
    assert ("1-2",) in paths and ("1-3", "3-2") in paths


def test_row_sums_count_routes(triangle):
    counts = [sum(lid in r.link_ids for r in triangle.routes) for lid in instances.TRIANGLE_LINKS]
    np.testing.assert_array_equal(triangle.routing_matrix.sum(axis=1), counts)


def test_hop_delays_sum_to_round_trip(triangle):
    for r in triangle.routes:
        for h in r.hops:
            assert h.t_rj + h.t_jr == r.round_trip


def test_model_is_read_only(sl1):
    with pytest.raises(ValueError):
        sl1.routing_matrix[0, 0] = 2.0


@pytest.mark.parametrize("build, match", [
    (lambda: build_network([Link("l1", 1.0)], [route_from_path("r1", "s1", ["l9"], [0.0])],
                           [Source("s1", ("r1",))]), "unknown link"),
    (lambda: build_network([Link("l1", 1.0)], [route_from_path("r1", "s1", ["l1"], [0.0])],
                           [Source("s1", ("r2",))]), "unknown route"),
    (lambda: build_network([Link("l1", 1.0)], [Route("r1", "s1", (), 0.0)],
                           [Source("s1", ("r1",))]), "empty"),
    (lambda: build_network([Link("l1", 1.0)], [Route("r1", "s1", (Hop("l1", 0.001, 0.002),), 0.004)],
                           [Source("s1", ("r1",))]), "round trip"),
    (lambda: build_network([Link("l1", 1.0), Link("l1", 2.0)],
                           [route_from_path("r1", "s1", ["l1"], [0.0])],
                           [Source("s1", ("r1",))]), "duplicate"),
])
def test_build_network_errors(build, match):
    with pytest.raises(NetworkError, match=match):
        build()


def test_delay_identity_tolerance():
    # 1e-13 s of mismatch is inside the 1e-12 s tolerance
    route = Route("r1", "s1", (Hop("l1", 0.001, 0.002 + 1e-13),), 0.003)
    build_network([Link("l1", 1.0)], [route], [Source("s1", ("r1",))])


def test_invalid_link_and_source():
    with pytest.raises(NetworkError):
        Link("l1", 0.0)
    with pytest.raises(NetworkError):
        Source("s1", ())
    with pytest.raises(NetworkError):
        Source("s1", ("r1",), weight=-1.0)


def test_params():
    assert AlgorithmParams(p=2.0).q == 2.0
    assert AlgorithmParams(p=3.0).q == pytest.approx(1.5)
    with pytest.raises(ValueError):
        AlgorithmParams(p=1.0)
    with pytest.raises(ValueError):
        AlgorithmParams(gamma=1.5)


def test_utility_examples():
    assert utility(1.0, 1.0, 1.0) == 0.0
    assert utility_prime(1.0, 1.0, 1.0) == 1.0
    assert utility_prime(4.0, 1.0, 2.0) == pytest.approx(1.0 / 16.0)
    assert utility(math.e, 2.0, 1.0) == pytest.approx(2.0)
    assert utility(2.0, 1.0, 2.0) == pytest.approx(-0.5)


def test_demand_examples():
    assert demand(2.0, 1.0, 1.0) == pytest.approx(0.5)
    assert demand(1.0, 4.0, 2.0) == pytest.approx(2.0)
    for y in (0.5, 1.0, 3.0):
        assert demand(utility_prime(y)) == pytest.approx(y, rel=1e-12)


@pytest.mark.parametrize("fn", [utility, utility_prime, demand])
def test_nonpositive_argument_rejected(fn):
    with pytest.raises(ValueError):
        fn(0.0)


@settings(max_examples=200, deadline=None)
@given(y=st.floats(1e-6, 1e6), w=st.floats(0.1, 10.0), alpha=st.floats(0.2, 5.0))
def test_demand_inverts_marginal_utility(y, w, alpha):
    assert demand(utility_prime(y, w, alpha), w, alpha) == pytest.approx(y, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(y1=st.floats(1e-3, 1e3), ratio=st.floats(1.01, 100.0), alpha=st.floats(0.2, 5.0))
def test_utility_strictly_concave(y1, ratio, alpha):
    y2 = y1 * ratio
    assert utility(0.5 * (y1 + y2), 1.0, alpha) > 0.5 * (utility(y1, 1.0, alpha) + utility(y2, 1.0, alpha))


def test_assumption_h():
    p = AlgorithmParams(p=2.0)
    srcs = [Source("a", ("r",), alpha=1.0), Source("b", ("r",), alpha=0.4), Source("c", ("r",), alpha=0.5)]
    assert check_assumption_h(p, srcs) == {"a": True, "b": False, "c": False}


def test_rank_report(two_route):
    assert two_route.rank_report([0]) == {"links": 2, "rank": 2, "saturated": ["l1"], "saturated_rank": 1}


def test_rank_deficiency_warns(caplog):
    instances.abilene()
    assert "rank" in caplog.text
