import sys

import numpy as np
import pytest

from adaptive_mpc.grid import SpaceMesh, SpaceTimeGrid, TimeGrid


def random_mesh(rng, L=3.0, max_nodes=9, min_nodes=3):
    n = int(rng.integers(min_nodes, max_nodes + 1))
    inner = np.sort(rng.uniform(0.05, L - 0.05, size=n - 2))
    while np.any(np.diff(inner) < 1e-3):
        inner = np.sort(rng.uniform(0.05, L - 0.05, size=n - 2))
    return SpaceMesh(np.concatenate([[0.0], inner, [L]]))


def random_grid(rng, max_slabs=8, max_nodes=9, T=2.0, L=3.0):
    M = int(rng.integers(2, max_slabs + 1))
    inner = np.sort(rng.uniform(0.05, T - 0.05, size=M - 1))
    while np.any(np.diff(inner) < 1e-3):
        inner = np.sort(rng.uniform(0.05, T - 0.05, size=M - 1))
    time = TimeGrid(np.concatenate([[0.0], inner, [T]]))
    return SpaceTimeGrid(time, tuple(random_mesh(rng, L, max_nodes) for _ in range(M + 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
