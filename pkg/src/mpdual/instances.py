"""Reference networks used throughout the tests and the bundled scenarios."""

from __future__ import annotations

import numpy as np

from mpdual.network import Link, NetworkModel, Source, build_network, route_from_path


def single_link(capacity=1.0, one_way=0.005, weight=1.0, alpha=1.0) -> NetworkModel:
    """SL1: one source, one route, one link."""
    return build_network(
        [Link("l1", capacity)],
        [route_from_path("r1", "s1", ["l1"], [one_way])],
        [Source("s1", ("r1",), weight, alpha)],
    )


def two_route(capacities=(1.0, 1.0), one_way=(0.005, 0.005)) -> NetworkModel:
    """One source splitting over two disjoint single-link routes."""
    return build_network(
        [Link("l1", capacities[0]), Link("l2", capacities[1])],
        [route_from_path("r1", "s1", ["l1"], [one_way[0]]),
         route_from_path("r2", "s1", ["l2"], [one_way[1]])],
        [Source("s1", ("r1", "r2"))],
    )


def asymmetric(c1=1.0, c2=2.0, one_way=0.005) -> NetworkModel:
    """Two-route source ``a`` competing with single-route source ``b`` on link ``l2``.

    The multi-route term pulls ``a`` onto the shared link, so the gap to the
    proportionally fair optimum grows with the blending weight.
    """
    return build_network(
        [Link("l1", c1), Link("l2", c2)],
        [route_from_path("a1", "a", ["l1"], [one_way]),
         route_from_path("a2", "a", ["l2"], [one_way]),
         route_from_path("b1", "b", ["l2"], [one_way])],
        [Source("a", ("a1", "a2")), Source("b", ("b1",))],
    )


TRIANGLE_LINKS = ("1-2", "1-3", "2-3", "3-2", "2-4", "3-4")
TRIANGLE_ROUTES = {
    "p12": (("1-2",), ("1-3", "3-2")),
    "p13": (("1-3",), ("1-2", "2-3")),
    "p14": (("1-2", "2-4"), ("1-3", "3-4"), ("1-2", "2-3", "3-4")),
}


def triangle(capacity=100.0, one_way=0.002) -> NetworkModel:
    """Four nodes; node 1 sends to nodes 2, 3 and 4 over seven routes.

    Reconstruction of the small testbed: directed links 1-2, 1-3, 2-3, 3-2,
    2-4, 3-4, every pair owning several routes (1->2 directly and via 3,
    and so on).
    """
    links = [Link(l, capacity) for l in TRIANGLE_LINKS]
    routes, sources = [], []
    for pair, paths in TRIANGLE_ROUTES.items():
        ids = []
        for k, path in enumerate(paths, start=1):
            rid = f"{pair}.{k}"
            ids.append(rid)
            routes.append(route_from_path(rid, pair, path, [one_way] * len(path)))
        sources.append(Source(pair, tuple(ids)))
    return build_network(links, routes, sources)


ABILENE_LINKS = (
    "SEA-SNV", "SEA-DEN", "SNV-LA", "SNV-DEN", "LA-HOU", "DEN-KC", "KC-HOU",
    "KC-IND", "HOU-ATL", "IND-CHI", "IND-ATL", "CHI-NY", "ATL-WDC", "NY-WDC",
)
ABILENE_ROUTES = {
    "sea-ny": (("SEA-DEN", "DEN-KC", "KC-IND", "IND-CHI", "CHI-NY"),
               ("SEA-SNV", "SNV-LA", "LA-HOU", "HOU-ATL", "ATL-WDC", "NY-WDC")),
    "snv-atl": (("SNV-DEN", "DEN-KC", "KC-HOU", "HOU-ATL"),
                ("SNV-LA", "LA-HOU", "HOU-ATL")),
}


def abilene(capacity=100.0, one_way=0.002) -> NetworkModel:
    """Abilene backbone: 14 links of 100 Mb/s and 2 ms, two sources with two routes each.

    The route set is a reconstruction; links are treated as shared
    resources regardless of direction.
    """
    links = [Link(l, capacity) for l in ABILENE_LINKS]
    routes, sources = [], []
    for pair, paths in ABILENE_ROUTES.items():
        ids = []
        for k, path in enumerate(paths, start=1):
            rid = f"{pair}.{k}"
            ids.append(rid)
            routes.append(route_from_path(rid, pair, path, [one_way] * len(path)))
        sources.append(Source(pair, tuple(ids)))
    return build_network(links, routes, sources)


def random_instance(rng: np.random.Generator, max_links=4, max_routes=3, max_sources=3,
                    capacity_range=(0.5, 2.0), alpha=1.0) -> NetworkModel:
    """Random topology with distinct link subsets per source."""
    J = int(rng.integers(1, max_links + 1))
    links = [Link(f"l{j}", float(rng.uniform(*capacity_range))) for j in range(J)]
    subsets = [tuple(f"l{j}" for j in range(J) if mask >> j & 1) for mask in range(1, 2 ** J)]
    routes, sources = [], []
    for s in range(int(rng.integers(1, max_sources + 1))):
        k = int(rng.integers(1, min(max_routes, len(subsets)) + 1))
        picks = rng.choice(len(subsets), size=k, replace=False)
        ids = []
        for n, i in enumerate(sorted(picks)):
            path = list(subsets[i])
            rng.shuffle(path)
            rid = f"s{s}.r{n}"
            ids.append(rid)
            routes.append(route_from_path(rid, f"s{s}", path, [0.005] * len(path)))
        sources.append(Source(f"s{s}", tuple(ids), 1.0, alpha))
    return build_network(links, routes, sources)
