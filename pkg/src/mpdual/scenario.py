"""Plain-text scenario files.

A scenario is a sequence of ``[section]`` headers. ``[scenario]``,
``[gains]`` and ``[initial]`` hold ``key = value`` lines; ``[links]``,
``[sources]`` and ``[routes]`` are whitespace-separated tables, one row per
line. ``#`` starts a comment anywhere on a line. Per-element values are
written ``id:value, id:value``; a bare number applies to every element.

Example::

    [scenario]
    name = sl1
    mode = undelayed        # or: delayed
    p = 2
    gamma = 0.5
    dt = 0.005
    duration = 50

    [gains]
    kappa_link = 1
    kappa_source = 0.3
    scalable = 0.4          # kappa of the scalable scheme (delayed mode, checks)

    [links]
    # id   capacity  delay
    l1     1         0.005

    [sources]
    # id   weight  alpha  [max_rate]
    s1     1       1

    [routes]
    # id   source  links
    r1     s1      l1

    [initial]
    mu = 0.01
    nu_fraction = 0.5
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from mpdual.delayed import delay_lags
from mpdual.errors import NetworkError, ScenarioError
from mpdual.network import AlgorithmParams, Link, NetworkModel, Source, build_network, route_from_path

SECTIONS = ("scenario", "gains", "links", "sources", "routes", "initial")
MODES = ("undelayed", "delayed")
SCENARIO_KEYS = {"name", "mode", "p", "gamma", "dt", "duration", "seed", "description"}
GAIN_KEYS = {"kappa_link", "kappa_source", "rho", "scalable"}
INITIAL_KEYS = {"mu", "nu", "nu_fraction", "perturb"}


@dataclass(frozen=True)
class Scenario:
    name: str
    model: NetworkModel
    params: AlgorithmParams
    mode: str
    dt: float
    duration: float
    # per-link / per-source arrays, None when unset
    kappa_link: np.ndarray | None = None
    kappa_source: np.ndarray | None = None
    rho: np.ndarray | None = None
    scalable: float | None = None
    max_rate: np.ndarray | None = None
    mu0: np.ndarray | None = None
    nu0: np.ndarray | None = None
    nu_fraction: float = 0.5
    perturb: float = 0.0
    seed: int = 0
    description: str = ""
    link_delay: dict = field(default_factory=dict)
    source_path: str | None = None

    def with_overrides(self, **kw) -> "Scenario":
        """Copy with fields replaced (``None`` values are ignored) and re-validated."""
        kw = {k: v for k, v in kw.items() if v is not None}
        new = replace(self, **kw)
        problems = _validate_timing(new)
        if problems:
            _raise(problems, new.source_path)
        return new


def _raise(problems, path):
    where = f"{path}: " if path else ""
    raise ScenarioError(f"{where}{len(problems)} problem(s): " + "; ".join(problems), problems)


def _validate_timing(sc: Scenario) -> list[str]:
    problems = []
    if not sc.dt > 0:
        problems.append(f"dt must be > 0, got {sc.dt}")
    elif not sc.duration >= sc.dt:
        problems.append(f"duration {sc.duration} must be >= dt {sc.dt}")
    if sc.mode == "delayed" and sc.dt > 0:
        # raises DelayGridMismatch naming the offending delay
        delay_lags(sc.model, sc.dt)
    if sc.params.gamma == 0.0:
        problems.append("gamma must lie in (0, 1] for the dynamics")
    return problems


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def _number(text: str, where: str, problems: list) -> float:
    try:
        v = float(text)
    except ValueError:
        problems.append(f"{where}: expected a number, got {text!r}")
        return math.nan
    if not math.isfinite(v):
        problems.append(f"{where}: value must be finite, got {text!r}")
    return v


def _vector(text: str, ids: list[str], where: str, problems: list) -> np.ndarray | None:
    """Scalar broadcast or ``id:value`` list; unspecified ids are an error."""
    text = text.strip()
    if ":" not in text:
        v = _number(text, where, problems)
        return np.full(len(ids), v)
    out = dict.fromkeys(ids)
    for item in text.split(","):
        if not item.strip():
            continue
        key, _, val = item.partition(":")
        key = key.strip()
        if key not in out:
            problems.append(f"{where}: unknown id {key!r}")
            continue
        out[key] = _number(val.strip(), f"{where} [{key}]", problems)
    missing = [k for k, v in out.items() if v is None]
    if missing:
        problems.append(f"{where}: no value for {missing}")
        return None
    return np.array([out[k] for k in ids], dtype=float)


def parse_scenario(text: str, path: str | None = None) -> Scenario:
    """Parse and validate scenario text; every problem found is reported at once."""
    problems: list[str] = []
    sections: dict[str, list[tuple[int, str]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip(raw)
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            if current not in SECTIONS:
                problems.append(f"line {lineno}: unknown section [{current}]")
                current = None
            elif current in sections:
                problems.append(f"line {lineno}: section [{current}] repeated")
            else:
                sections[current] = []
            continue
        if current is None:
            problems.append(f"line {lineno}: content outside a known section")
            continue
        sections[current].append((lineno, line))

    def keyvals(name, allowed):
        kv = {}
        for lineno, line in sections.get(name, []):
            key, sep, val = line.partition("=")
            key = key.strip().lower()
            if not sep:
                problems.append(f"line {lineno}: expected 'key = value' in [{name}]")
            elif key not in allowed:
                problems.append(f"line {lineno}: unknown key {key!r} in [{name}]")
            elif key in kv:
                problems.append(f"line {lineno}: key {key!r} repeated")
            else:
                kv[key] = (lineno, val.strip())
        return kv

    head = keyvals("scenario", SCENARIO_KEYS)
    gains = keyvals("gains", GAIN_KEYS)
    init = keyvals("initial", INITIAL_KEYS)
    for req in ("links", "sources", "routes"):
        if not sections.get(req):
            problems.append(f"section [{req}] is missing or empty")

    def num(kv, key, default):
        if key not in kv:
            return default
        lineno, val = kv[key]
        return _number(val, f"line {lineno}: {key}", problems)

    links, delays = [], {}
    for lineno, line in sections.get("links", []):
        cols = line.split()
        if len(cols) != 3:
            problems.append(f"line {lineno}: link row needs 'id capacity delay', got {len(cols)} fields")
            continue
        cap = _number(cols[1], f"line {lineno}: capacity", problems)
        d = _number(cols[2], f"line {lineno}: delay", problems)
        if cap == cap and cap <= 0:
            problems.append(f"line {lineno}: capacity must be > 0")
            continue
        if d == d and d < 0:
            problems.append(f"line {lineno}: delay must be >= 0")
        if cap == cap:
            links.append(Link(cols[0], cap))
            delays[cols[0]] = d

    sources_rows, routes_by_source = [], {}
    for lineno, line in sections.get("sources", []):
        cols = line.split()
        if len(cols) not in (3, 4):
            problems.append(f"line {lineno}: source row needs 'id weight alpha [max_rate]'")
            continue
        vals = [_number(c, f"line {lineno}: {n}", problems)
                for c, n in zip(cols[1:], ("weight", "alpha", "max_rate"))]
        if any(v == v and v <= 0 for v in vals):
            problems.append(f"line {lineno}: weight, alpha and max_rate must be > 0")
            continue
        sources_rows.append((lineno, cols[0], vals))
        routes_by_source[cols[0]] = []

    routes = []
    for lineno, line in sections.get("routes", []):
        cols = line.split()
        if len(cols) != 3:
            problems.append(f"line {lineno}: route row needs 'id source link,link,...'")
            continue
        rid, sid, hop_list = cols
        hops = [h.strip() for h in hop_list.split(",") if h.strip()]
        unknown = [h for h in hops if h not in delays]
        if unknown:
            problems.append(f"line {lineno}: route {rid!r} uses unknown links {unknown}")
            continue
        if sid not in routes_by_source:
            problems.append(f"line {lineno}: route {rid!r} names unknown source {sid!r}")
            continue
        try:
            routes.append(route_from_path(rid, sid, hops, [delays[h] for h in hops]))
        except NetworkError as exc:
            problems.append(f"line {lineno}: {exc}")
            continue
        routes_by_source[sid].append(rid)

    sources, max_rate = [], []
    for lineno, sid, vals in sources_rows:
        if not routes_by_source[sid]:
            problems.append(f"line {lineno}: source {sid!r} owns no routes")
            continue
        sources.append(Source(sid, tuple(routes_by_source[sid]), vals[0], vals[1]))
        max_rate.append(vals[2] if len(vals) == 3 else math.nan)

    if problems:
        _raise(problems, path)
    try:
        model = build_network(links, routes, sources)
    except NetworkError as exc:
        _raise([str(exc)], path)

    link_ids = [l.id for l in model.links]
    source_ids = [s.id for s in model.sources]

    def vec(kv, key, ids):
        if key not in kv:
            return None
        lineno, val = kv[key]
        v = _vector(val, ids, f"line {lineno}: {key}", problems)
        if v is not None and np.any(v <= 0) and key != "mu":
            problems.append(f"line {lineno}: {key} must be > 0")
        return v

    mode = head.get("mode", (0, "undelayed"))[1].lower()
    if mode not in MODES:
        problems.append(f"line {head['mode'][0]}: mode must be one of {MODES}")
    p = num(head, "p", 2.0)
    gamma = num(head, "gamma", 0.5)
    try:
        params = AlgorithmParams(p, gamma)
    except ValueError as exc:
        problems.append(f"[scenario]: {exc}")
        params = None
    seed = num(head, "seed", 0)
    if seed == seed and seed != int(seed):
        problems.append("seed must be an integer")
    scal = num(gains, "scalable", None)
    if scal is not None and scal == scal and not 0 < scal < math.pi / 4:
        problems.append(f"line {gains['scalable'][0]}: scalable must lie in (0, pi/4)")
    mu0 = vec(init, "mu", link_ids)
    if mu0 is not None and np.any(mu0 < 0):
        problems.append("initial mu must be >= 0")
    mr = np.array(max_rate)
    sc = Scenario(
        name=head.get("name", (0, Path(path).stem if path else "scenario"))[1],
        model=model, params=params, mode=mode,
        dt=num(head, "dt", 0.005), duration=num(head, "duration", 50.0),
        kappa_link=vec(gains, "kappa_link", link_ids),
        kappa_source=vec(gains, "kappa_source", source_ids),
        rho=vec(gains, "rho", source_ids),
        scalable=scal,
        max_rate=None if np.isnan(mr).any() else mr,
        mu0=mu0, nu0=vec(init, "nu", source_ids),
        nu_fraction=num(init, "nu_fraction", 0.5),
        perturb=num(init, "perturb", 0.0),
        seed=int(seed) if seed == seed else 0,
        description=head.get("description", (0, ""))[1],
        link_delay=delays, source_path=path,
    )
    if np.isnan(mr).any() and not np.isnan(mr).all():
        problems.append("max_rate must be given for every source or for none")
    if not 0 < sc.nu_fraction < 1:
        problems.append("nu_fraction must lie in (0, 1)")
    if sc.perturb < 0 or sc.perturb >= 1:
        problems.append("perturb must lie in [0, 1)")
    if params is not None:
        problems.extend(_validate_timing(sc))
    if problems:
        _raise(problems, path)
    return sc


def load_scenario(path) -> Scenario:
    """Load a scenario from ``path`` or, failing that, from the bundled library by name."""
    p = Path(path)
    if not p.exists():
        name = p.name if p.suffix == ".scn" else f"{p.name}.scn"
        bundled = resources.files("mpdual.scenarios") / name
        if not bundled.is_file():
            raise FileNotFoundError(f"no scenario file {str(path)!r} and no bundled scenario {name!r}")
        return parse_scenario(bundled.read_text(), str(name))
    return parse_scenario(p.read_text(), str(p))


def bundled_scenarios() -> list[str]:
    return sorted(f.name[:-4] for f in resources.files("mpdual.scenarios").iterdir()
                  if f.name.endswith(".scn"))
