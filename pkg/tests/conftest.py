import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mfglab.forward import SolverParams  # noqa: E402
from mfglab.grid import build_grid  # noqa: E402
from mfglab.stability import default_base_p, default_setup  # noqa: E402


@pytest.fixture(scope="session")
def grid99():
    return build_grid(1, 99, 1.0, 200)


@pytest.fixture(scope="session")
def small_grid():
    return build_grid(1, 39, 1.0, 80)


@pytest.fixture(scope="session")
def setup99(grid99):
    return default_setup(grid99)


@pytest.fixture(scope="session")
def base_pair(grid99, setup99):
    """Default base p and a smooth perturbation, with both forward solutions."""
    import numpy as np

    p2 = default_base_p(grid99)
    x = grid99.coords[0]
    p1 = p2 + 0.1 * np.sin(2 * np.pi * x) * np.sin(np.pi * x) ** 2
    return p1, p2, setup99.solve(p1), setup99.solve(p2)


@pytest.fixture(scope="session")
def tight_params():
    return SolverParams(picard_tol=1e-12)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for the acceptance summary."""

    def _report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
