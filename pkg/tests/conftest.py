import numpy as np
import pytest

from mpdual import instances
from mpdual.network import AlgorithmParams


@pytest.fixture
def params():
    return AlgorithmParams(p=2.0, gamma=0.5)


@pytest.fixture
def sl1():
    return instances.single_link()


@pytest.fixture
def two_route():
    return instances.two_route()


@pytest.fixture
def triangle():
    return instances.triangle()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_route_eq():
    """Symmetric equilibrium: x = 1 per route, mu = 1/2 per link."""
    return {
        "x": np.ones(2),
        "mu": np.full(2, 0.5),
        "nu": np.array([(np.sqrt(2.0) - 1.0) / 2.0]),
        "ybar": np.array([(1.0 + np.sqrt(2.0) / 2.0) ** 2]),
    }


# Acceptance verdicts, filled by tests/test_acceptance.py and printed after the run.
ACCEPTANCE: dict = {}


@pytest.fixture
def verdict():
    """Record ``(criterion, check, passed, detail)``; ``passed=None`` marks an informational line."""
    def record(criterion: str, check: str, passed, detail: str = ""):
        ACCEPTANCE.setdefault(criterion, []).append((check, passed, detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE, key=lambda c: int(c.split()[0][1:])):
        checks = ACCEPTANCE[criterion]
        ok = all(p for _, p, _ in checks if p is not None)
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {criterion}")
        for check, passed, detail in checks:
            tag = "info" if passed is None else ("pass" if passed else "FAIL")
            tr.write_line(f"    {tag:>4}  {check}" + (f": {detail}" if detail else ""))
