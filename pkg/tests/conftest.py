import os
from pathlib import Path

import numpy as np
import pytest

from epsi_bench.matrix_core import DenseOperator, SparseOperator

DATA_DIR = Path(__file__).parent / "data"

# Filled by tests/test_acceptance.py, echoed at the end of the session.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_psd(n, rng, rank=None, decay=None):
    """Dense random PSD matrix with a Haar eigenbasis and simple eigenvalues."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    if decay is None:
        lam = np.sort(rng.uniform(0.01, 1.0, n))[::-1]
    else:
        lam = decay ** np.arange(n)
    if rank is not None:
        lam[rank:] = 0.0
    return (q * lam) @ q.T, q, lam


def random_orthonormal(n, k, rng):
    if k == 0:
        return np.empty((n, 0))
    q, _ = np.linalg.qr(rng.standard_normal((n, k)))
    return q


def bus_like_matrix(seed=0, n=1138, n_offdiag=1458):
    """Sparse SPD stand-in for a power-network admittance pattern.

    A random spanning tree plus extra edges gives ``n_offdiag`` distinct
    lower-triangle couplings; the diagonal makes the matrix strictly
    diagonally dominant.  Stored entries: ``n + n_offdiag`` (2596 by default).
    """
    rng = np.random.default_rng(seed)
    edges = set()
    perm = rng.permutation(n)
    for i in range(1, n):
        a, b = perm[i], perm[rng.integers(0, i)]
        edges.add((max(a, b), min(a, b)))
    while len(edges) < n_offdiag:
        a, b = rng.integers(0, n, size=2)
        if a != b:
            edges.add((max(a, b), min(a, b)))
    edges = sorted(edges)
    rows = np.array([e[0] for e in edges])
    cols = np.array([e[1] for e in edges])
    vals = -rng.uniform(0.1, 10.0, len(edges))
    deg = np.zeros(n)
    np.add.at(deg, rows, -vals)
    np.add.at(deg, cols, -vals)
    diag = deg + rng.uniform(0.01, 1.0, n)
    return SparseOperator(
        n,
        np.concatenate([rows, np.arange(n)]),
        np.concatenate([cols, np.arange(n)]),
        np.concatenate([vals, diag]),
    )


def bus_matrix_path():
    """Location of the 1138-bus Matrix Market file, or None when absent."""
    env = os.environ.get("EPSI_BUS_MATRIX")
    if env:
        return Path(env)
    p = DATA_DIR / "1138_bus.mtx"
    return p if p.exists() else None


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def diag21():
    return DenseOperator(np.diag([2.0, 1.0]))
