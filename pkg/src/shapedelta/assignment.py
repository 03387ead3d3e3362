"""Rectangular minimum-cost assignment with a deterministic tie rule."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

TIE_RTOL = 1e-12


def _optimum(cost: np.ndarray, rows: list[int], cols: list[int]) -> tuple[float, int]:
    if not rows or not cols:
        return 0.0, 0
    sub = cost[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub)
    return float(sub[r, c].sum()), len(r)


def linear_assignment(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of ``min(n, m)`` (row, col) pairs.

    Among optimal assignments the lexicographically smallest row-sorted pair
    list is returned, so ties are broken towards low source indices.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-d matrix")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    if not np.all(np.isfinite(cost)) or np.any(cost < 0):
        raise ValueError("costs must be finite and non-negative")
    if n == 1:
        return [(0, int(np.argmin(cost[0])))]
    if m == 1:
        return [(int(np.argmin(cost[:, 0])), 0)]

    best, k = _optimum(cost, list(range(n)), list(range(m)))
    tol = TIE_RTOL * max(1.0, abs(best))
    pairs: list[tuple[int, int]] = []
    fixed_cost = 0.0
    free_cols = list(range(m))
    start = 0
    while len(pairs) < k:
        need = k - len(pairs) - 1
        chosen = None
        for i in range(start, n):
            rows_after = list(range(i + 1, n))
            for j in free_cols:
                cols_after = [c for c in free_cols if c != j]
                if min(len(rows_after), len(cols_after)) < need:
                    continue
                rest, got = _optimum(cost, rows_after, cols_after)
                if got != need:
                    continue
                if fixed_cost + cost[i, j] + rest <= best + tol:
                    chosen = (i, j)
                    break
            if chosen is not None:
                break
        if chosen is None:  # numerically impossible; fall back to the plain optimum
            r, c = linear_sum_assignment(cost)
            return sorted(zip(map(int, r), map(int, c)))
        i, j = chosen
        pairs.append((i, j))
        fixed_cost += cost[i, j]
        free_cols.remove(j)
        start = i + 1
    return pairs


def assignment_cost(cost, pairs) -> float:
    cost = np.asarray(cost, dtype=float)
    return float(sum(cost[i, j] for i, j in pairs))
