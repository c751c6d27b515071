"""Shared oracles and the acceptance summary hook."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from hdqr.core import check_loss

ACCEPTANCE_LINES: list = []


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append((number, "PASS" if ok else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")


def brute_force_l1qr(z, y, tau, pen, weights=None):
    """Minimum of ``E_n[w rho_tau(y - z b)] + sum pen_j |b_j|`` by vertex enumeration.

    Each penalty term is written as two extra check-loss rows
    ``rho(0 -/+ n pen_j b_j)``, which turns the problem into an
    unpenalized weighted LAD-type LP whose optimum sits on a vertex
    interpolating ``k`` rows.
    """
    n, k = z.shape
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    rows, ys, ws = [z], [y], [w]
    for j in range(k):
        if pen[j] > 0:
            e = np.zeros(k)
            e[j] = n * pen[j]
            rows += [e[None], -e[None]]
            ys += [[0.0], [0.0]]
            ws += [[1.0], [1.0]]
    Z = np.vstack(rows)
    Y = np.concatenate([np.ravel(a) for a in ys])
    W = np.concatenate([np.ravel(a) for a in ws])
    best = np.inf
    for S in itertools.combinations(range(Y.size), k):
        A = Z[list(S)]
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        b = np.linalg.solve(A, Y[list(S)])
        best = min(best, float(np.sum(W * check_loss(Y - Z @ b, tau)) / n))
    return best


def lattice_search(obj, p, step=1e-4, radius=8.0, start=None):
    """Minimum of a convex ``obj`` over the lattice ``step * Z^p`` in a box.

    Coarse-to-fine pattern search; every trial point is a lattice point, so
    the result is an upper bound attained on the ``step`` grid.
    """
    x = np.zeros(p) if start is None else np.round(np.asarray(start) / step) * step
    best = obj(x)
    moves = np.array(list(itertools.product((-1, 0, 1), repeat=p)), dtype=float)
    scale = 2 ** int(np.ceil(np.log2(radius / step)))
    while scale >= 1:
        h = scale * step
        improved = True
        while improved:
            improved = False
            for m in moves:
                cand = x + h * m
                if np.any(np.abs(cand) > radius):
                    continue
                val = obj(cand)
                if val < best - 1e-15:
                    x, best, improved = cand, val, True
        scale //= 2
    return x, best


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
