import numpy as np
import pytest

from tsde_lq.lqr_core import CostMatrices
from tsde_lq.posterior import SupportSet
from tsde_lq.stability import certify

SCALAR_LOWER = [[0.8], [0.8]]
SCALAR_UPPER = [[1.2], [1.2]]


def scalar_box() -> SupportSet:
    return SupportSet.box_from_bounds(SCALAR_LOWER, SCALAR_UPPER)


def aq_support(half_a: float = 1e-5, half_b: float = 1e-4) -> SupportSet:
    """Box around A_q = [[0.5, 100], [0, 0.5]] with B near zero (n=2, m=1)."""
    A_q = np.array([[0.5, 100.0], [0.0, 0.5]])
    center = np.vstack([A_q.T, np.zeros((1, 2))])
    radius = np.vstack([np.full((2, 2), half_a), np.full((1, 2), half_b)])
    return SupportSet("box", center, radius)


@pytest.fixture(scope="session")
def unit_cost():
    return CostMatrices([[1.0]], [[1.0]])


@pytest.fixture(scope="session")
def scalar_support():
    return scalar_box()


@pytest.fixture(scope="session")
def scalar_certificate(scalar_support, unit_cost):
    cert, _ = certify(scalar_support, unit_cost, n_samples=500, rng_seed=0)
    assert cert is not None
    return cert


@pytest.fixture(scope="session")
def aq_cost():
    return CostMatrices(np.eye(2), [[1.0]])


@pytest.fixture(scope="session")
def aq_certificate(aq_cost):
    cert, pairs = certify(aq_support(), aq_cost, n_samples=300, rng_seed=0)
    assert cert is not None
    return cert, pairs


def random_stabilizable(rng, n, m):
    """Random (A, B) with B of full column rank and A scaled to spectral radius below 1.5."""
    A = rng.standard_normal((n, n))
    A *= rng.uniform(0.2, 1.5) / max(np.abs(np.linalg.eigvals(A)).max(), 1e-9)
    B = rng.standard_normal((n, m))
    return A, B


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one pass/fail line for the acceptance summary."""

    def _report(name: str, passed: bool, detail: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
