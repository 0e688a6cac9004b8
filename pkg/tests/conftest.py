import sys

import numpy as np
import pytest

from igcn.mesh import MeshGraph


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def tetrahedron(scale=1.0):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float) * scale
    t = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return MeshGraph(v, t)


def random_connected_graph(rng, n, extra=None):
    """Dense adjacency of a random spanning tree plus a few extra edges."""
    a = np.zeros((n, n))
    for i in range(1, n):
        j = rng.integers(0, i)
        a[i, j] = a[j, i] = 1
    for _ in range(n if extra is None else extra):
        i, j = rng.integers(0, n, size=2)
        if i != j:
            a[i, j] = a[j, i] = 1
    return a


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
