"""Topologies, routes, sources and the weighted alpha-fair utility family.

Units: capacities and rates in Mb/s, delays in seconds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from mpdual.errors import NetworkError

log = logging.getLogger(__name__)

DELAY_TOL = 1e-12


@dataclass(frozen=True)
class Link:
    id: str
    capacity: float

    def __post_init__(self):
        if not self.capacity > 0:
            raise NetworkError(f"link {self.id!r}: capacity must be > 0, got {self.capacity}")


@dataclass(frozen=True)
class Hop:
    """One link of a route with its forward (``t_rj``) and feedback (``t_jr``) delays."""

    link_id: str
    t_rj: float
    t_jr: float


@dataclass(frozen=True)
class Route:
    id: str
    source_id: str
    hops: tuple[Hop, ...]
    round_trip: float

    @property
    def link_ids(self) -> tuple[str, ...]:
        return tuple(h.link_id for h in self.hops)


@dataclass(frozen=True)
class Source:
    id: str
    route_ids: tuple[str, ...]
    weight: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if not self.route_ids:
            raise NetworkError(f"source {self.id!r} owns no routes")
        if not self.weight > 0:
            raise NetworkError(f"source {self.id!r}: weight must be > 0")
        if not self.alpha > 0:
            raise NetworkError(f"source {self.id!r}: alpha must be > 0")


@dataclass(frozen=True)
class AlgorithmParams:
    """Exponent ``p`` and blending weight ``gamma``; ``q`` is always derived."""

    p: float = 2.0
    gamma: float = 0.5

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError(f"p must be > 1, got {self.p}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")

    @property
    def q(self) -> float:
        return self.p / (self.p - 1.0)


def route_from_path(route_id: str, source_id: str, link_ids: Sequence[str],
                    one_way: Sequence[float]) -> Route:
    """Build a route whose feedback retraces the forward path.

    The forward delay to a link is the propagation over the links before it;
    the round trip is twice the one-way path delay.
    """
    if len(link_ids) != len(one_way):
        raise NetworkError(f"route {route_id!r}: {len(link_ids)} links but {len(one_way)} delays")
    rtt = 2.0 * float(sum(one_way))
    hops = []
    ahead = 0.0
    for lid, d in zip(link_ids, one_way):
        hops.append(Hop(lid, ahead, rtt - ahead))
        ahead += float(d)
    return Route(route_id, source_id, tuple(hops), rtt)


@dataclass(frozen=True, eq=False)
class NetworkModel:
    links: tuple[Link, ...]
    routes: tuple[Route, ...]
    sources: tuple[Source, ...]
    # J x R, A[j, r] = 1 iff link j lies on route r
    routing_matrix: np.ndarray
    # S x R, ownership of routes by sources
    source_matrix: np.ndarray
    route_source: np.ndarray
    capacity: np.ndarray
    round_trip: np.ndarray
    # flattened hops
    hop_route: np.ndarray
    hop_link: np.ndarray
    hop_t_rj: np.ndarray
    hop_t_jr: np.ndarray
    # S x max|s| route indices padded with R (points past the last route)
    source_routes: np.ndarray
    weight: np.ndarray
    alpha: np.ndarray
    link_index: dict = field(repr=False)
    route_index: dict = field(repr=False)
    source_index: dict = field(repr=False)

    @property
    def J(self) -> int:
        return len(self.links)

    @property
    def R(self) -> int:
        return len(self.routes)

    @property
    def S(self) -> int:
        return len(self.sources)

    @property
    def routes_per_source(self) -> np.ndarray:
        return self.source_matrix.sum(axis=1).astype(int)

    def routes_of(self, source_id: str) -> list[int]:
        return [self.route_index[r] for r in self.sources[self.source_index[source_id]].route_ids]

    def link_load(self, x: np.ndarray) -> np.ndarray:
        return self.routing_matrix @ x

    def route_price(self, mu: np.ndarray) -> np.ndarray:
        return self.routing_matrix.T @ mu

    def source_total(self, per_route: np.ndarray) -> np.ndarray:
        return self.source_matrix @ per_route

    def utility(self, y: np.ndarray) -> np.ndarray:
        """Per-source utility of the aggregate vector ``y`` (no domain checks)."""
        a = self.alpha
        if (a == 1.0).all():
            return self.weight * np.log(y)
        return utility(y, self.weight, a)

    def source_min(self, per_route: np.ndarray) -> np.ndarray:
        padded = np.append(per_route, np.inf)
        return padded[self.source_routes].min(axis=1)

    def rank_report(self, saturated: Iterable[int] | None = None) -> dict:
        """Rank of ``A`` and, optionally, of its rows restricted to ``saturated`` links."""
        A = self.routing_matrix
        out = {"links": self.J, "rank": int(np.linalg.matrix_rank(A)) if A.size else 0}
        if saturated is not None:
            rows = sorted(saturated)
            sub = A[rows]
            out["saturated"] = [self.links[j].id for j in rows]
            out["saturated_rank"] = int(np.linalg.matrix_rank(sub)) if rows else 0
        return out


def build_network(links: Sequence[Link], routes: Sequence[Route],
                  sources: Sequence[Source]) -> NetworkModel:
    links = tuple(links)
    routes = tuple(routes)
    sources = tuple(sources)
    problems = []

    def _index(items, kind):
        idx = {}
        for i, item in enumerate(items):
            if item.id in idx:
                problems.append(f"duplicate {kind} id {item.id!r}")
            idx[item.id] = i
        return idx

    link_index = _index(links, "link")
    route_index = _index(routes, "route")
    source_index = _index(sources, "source")

    owner = {}
    for s in sources:
        for rid in s.route_ids:
            if rid not in route_index:
                problems.append(f"source {s.id!r} references unknown route {rid!r}")
            elif rid in owner:
                problems.append(f"route {rid!r} claimed by sources {owner[rid]!r} and {s.id!r}")
            else:
                owner[rid] = s.id

    for r in routes:
        if not r.hops:
            problems.append(f"route {r.id!r} is empty")
        if r.source_id not in source_index:
            problems.append(f"route {r.id!r} references unknown source {r.source_id!r}")
        elif owner.get(r.id) != r.source_id:
            problems.append(f"route {r.id!r} names source {r.source_id!r} which does not list it")
        if r.round_trip < 0:
            problems.append(f"route {r.id!r}: negative round trip")
        seen = set()
        for h in r.hops:
            if h.link_id not in link_index:
                problems.append(f"route {r.id!r} references unknown link {h.link_id!r}")
            if h.link_id in seen:
                problems.append(f"route {r.id!r} visits link {h.link_id!r} twice")
            seen.add(h.link_id)
            if h.t_rj < 0 or h.t_jr < 0:
                problems.append(f"route {r.id!r}, link {h.link_id!r}: negative delay")
            if abs(h.t_rj + h.t_jr - r.round_trip) > DELAY_TOL:
                problems.append(
                    f"route {r.id!r}, link {h.link_id!r}: T_rj + T_jr = {h.t_rj + h.t_jr!r}"
                    f" differs from round trip {r.round_trip!r}")

    if problems:
        raise NetworkError("; ".join(problems))

    J, R, S = len(links), len(routes), len(sources)
    A = np.zeros((J, R))
    B = np.zeros((S, R))
    route_source = np.empty(R, dtype=int)
    hop_route, hop_link, t_rj, t_jr = [], [], [], []
    for r_i, r in enumerate(routes):
        s_i = source_index[r.source_id]
        B[s_i, r_i] = 1.0
        route_source[r_i] = s_i
        for h in r.hops:
            j = link_index[h.link_id]
            A[j, r_i] = 1.0
            hop_route.append(r_i)
            hop_link.append(j)
            t_rj.append(h.t_rj)
            t_jr.append(h.t_jr)

    width = max(len(s.route_ids) for s in sources) if sources else 0
    source_routes = np.full((S, width), R, dtype=int)
    for s_i, s in enumerate(sources):
        source_routes[s_i, :len(s.route_ids)] = [route_index[r] for r in s.route_ids]

    model = NetworkModel(
        links=links, routes=routes, sources=sources,
        routing_matrix=A, source_matrix=B, route_source=route_source,
        capacity=np.array([l.capacity for l in links], dtype=float),
        round_trip=np.array([r.round_trip for r in routes], dtype=float),
        hop_route=np.array(hop_route, dtype=int), hop_link=np.array(hop_link, dtype=int),
        hop_t_rj=np.array(t_rj, dtype=float), hop_t_jr=np.array(t_jr, dtype=float),
        source_routes=source_routes,
        weight=np.array([s.weight for s in sources], dtype=float),
        alpha=np.array([s.alpha for s in sources], dtype=float),
        link_index=link_index, route_index=route_index, source_index=source_index,
    )
    rank = model.rank_report()
    if rank["rank"] < J:
        # only bottleneck rows need to be independent, so this is advisory
        log.warning("routing matrix has rank %d < %d links", rank["rank"], J)
    for arr in (A, B, model.capacity, model.weight, model.alpha):
        arr.setflags(write=False)
    return model


def utility(y, w=1.0, alpha=1.0):
    """Weighted alpha-fair utility ``w * y**(1-alpha)/(1-alpha)`` (``w*log y`` at alpha=1)."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("utility is defined for y > 0 only")
    alpha = np.asarray(alpha, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        power = w * y ** (1.0 - alpha) / (1.0 - alpha)
    out = np.where(alpha == 1.0, w * np.log(y), power)
    return out[()] if out.ndim == 0 else out


def utility_prime(y, w=1.0, alpha=1.0):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("marginal utility is defined for y > 0 only")
    out = w * y ** (-np.asarray(alpha, dtype=float))
    return out[()] if np.ndim(out) == 0 else out


def utility_second(y, w=1.0, alpha=1.0):
    y = np.asarray(y, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    out = -alpha * w * y ** (-alpha - 1.0)
    return out[()] if np.ndim(out) == 0 else out


def demand(lam, w=1.0, alpha=1.0):
    """Inverse marginal utility ``(w/lam)**(1/alpha)``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("demand is defined for lam > 0 only")
    out = (w / lam) ** (1.0 / np.asarray(alpha, dtype=float))
    return out[()] if np.ndim(out) == 0 else out


def assumption_h_holds(alpha: float, p: float) -> bool:
    return alpha * p > 1.0


def check_assumption_h(params: AlgorithmParams, sources: Iterable[Source]) -> dict[str, bool]:
    """Per-source check that ``u**(q-1) * U'(u**q)`` is strictly decreasing (``alpha*p > 1``)."""
    return {s.id: assumption_h_holds(s.alpha, params.p) for s in sources}

