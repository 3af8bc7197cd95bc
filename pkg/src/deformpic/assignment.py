"""Exact linear assignment via shortest augmenting paths with dual potentials.

This is the O(n^3) Hungarian method in its Jonker-Volgenant form: rows are
inserted one at a time and a Dijkstra-like search over reduced costs finds
the augmenting path. The final potentials form a feasible dual, which is
what callers use to certify optimality.
"""
from __future__ import annotations

import numpy as np


def solve(cost):
    """Minimum-cost perfect matching of a square cost matrix.

    Returns ``(col_of_row, u, v)``: the assignment and dual potentials with
    ``u[i] + v[j] <= cost[i, j]`` everywhere and equality on matched pairs.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, n2 = cost.shape
    if n != n2:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    # 1-based arrays with a virtual column 0, as in the classical formulation
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of_col = np.zeros(n + 1, dtype=np.int64)  # 0 = unmatched
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            free = ~used
            free[0] = False
            cur = cost[i0 - 1] - u[i0] - v[1:]
            cols = np.nonzero(free[1:])[0] + 1
            cand = cur[cols - 1]
            better = cand < minv[cols]
            upd = cols[better]
            minv[upd] = cand[better]
            way[upd] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            u[row_of_col[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[row_of_col[1:] - 1] = np.arange(n)
    # v[0] carries the accumulated offset of the virtual column; drop it
    return col_of_row, u[1:], v[1:]


def linear_sum_assignment(cost):
    """``(rows, cols)`` of a minimum-cost perfect matching (scipy-compatible shape)."""
    col_of_row, _, _ = solve(cost)
    return np.arange(len(col_of_row)), col_of_row


def is_dual_certificate(cost, col_of_row, u, v, tol: float = 1e-9) -> bool:
    """Check complementary slackness, which proves the assignment optimal."""
    cost = np.asarray(cost, dtype=np.float64)
    reduced = cost - u[:, None] - v[None, :]
    scale = max(1.0, float(np.abs(cost).max()))
    feasible = reduced.min() >= -tol * scale
    tight = np.abs(reduced[np.arange(len(col_of_row)), col_of_row]).max() <= tol * scale
    is_perm = np.array_equal(np.sort(col_of_row), np.arange(len(col_of_row)))
    return bool(feasible and tight and is_perm)
