"""Maximum-profit one-to-one matching between predicted clusters and classes.

The solver is a dense O(K^3) Kuhn-Munkres implementation working on the
negated profit matrix. Among all optimal matchings it returns the
lexicographically smallest mapping (cluster 0 gets the lowest feasible class,
then cluster 1, ...), so results are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class AssignmentError(ValueError):
    """Invalid input to the matching routines."""


@dataclass(frozen=True)
class Assignment:
    mapping: tuple[int, ...]
    total_profit: float

    def apply(self, labels: Sequence[int] | np.ndarray) -> np.ndarray:
        """Relabel cluster ids through the mapping."""
        lut = np.asarray(self.mapping, dtype=np.int64)
        return lut[np.asarray(labels, dtype=np.int64)]


def build_profit_matrix(predicted, ground_truth, K: int) -> np.ndarray:
    """Contingency table: entry [c, g] counts samples in cluster c with class g."""
    pred = np.asarray(predicted)
    gt = np.asarray(ground_truth)
    if pred.ndim != 1 or gt.ndim != 1:
        raise AssignmentError("label sequences must be one-dimensional")
    if len(pred) != len(gt):
        raise AssignmentError(f"length mismatch: {len(pred)} predicted vs {len(gt)} ground-truth")
    if len(pred) == 0:
        raise AssignmentError("need at least one sample")
    if K < 1:
        raise AssignmentError("K must be positive")
    for name, arr in (("predicted", pred), ("ground_truth", gt)):
        if not np.issubdtype(arr.dtype, np.integer):
            raise AssignmentError(f"{name} ids must be integers")
        if arr.min() < 0 or arr.max() >= K:
            raise AssignmentError(f"{name} ids must lie in [0, {K})")
    table = np.zeros((K, K), dtype=np.int64)
    np.add.at(table, (pred, gt), 1)
    return table


def _check_square(profit) -> np.ndarray:
    P = np.asarray(profit, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 1:
        raise AssignmentError(f"profit matrix must be square and non-empty, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise AssignmentError("profit matrix contains non-finite entries")
    return P


def _hungarian_min(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest augmenting path Hungarian method for a square cost matrix.

    Returns (row_to_col, u, v) where u, v are optimal dual potentials with
    u[i] + v[j] <= cost[i, j] and equality on the matched pairs.
    """
    n = cost.shape[0]
    INF = np.inf
    # 1-based arrays with a virtual column 0, as in the classical formulation.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    col_owner = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        col_owner[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[col_owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if col_owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_owner[j0] = col_owner[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[col_owner[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _try_reassign(tight: np.ndarray, match: np.ndarray, owner: np.ndarray,
                  locked: np.ndarray, row: int, col: int) -> bool:
    """Move ``row`` onto ``col`` inside the tight subgraph, keeping a perfect matching.

    Finds an alternating path that frees the current partner of ``col`` and
    lands it on the column released by ``row``. Locked rows never move.
    """
    n = len(match)
    released = match[row]
    displaced = owner[col]
    # BFS from the displaced row over tight edges, searching for `released`.
    parent_col = np.full(n, -1, dtype=np.int64)
    seen_rows = np.zeros(n, dtype=bool)
    seen_rows[row] = True
    seen_rows[displaced] = True
    queue = [displaced]
    seen_cols = np.zeros(n, dtype=bool)
    seen_cols[col] = True
    found = -1
    while queue and found < 0:
        nxt = []
        for r in queue:
            for c in np.flatnonzero(tight[r]):
                if seen_cols[c]:
                    continue
                seen_cols[c] = True
                parent_col[c] = r
                if c == released:
                    found = c
                    break
                r2 = owner[c]
                if locked[r2] or seen_rows[r2]:
                    continue
                seen_rows[r2] = True
                nxt.append(r2)
            if found >= 0:
                break
        queue = nxt
    if found < 0:
        return False
    c = found
    while True:
        r = parent_col[c]
        prev = match[r]
        match[r] = c
        owner[c] = r
        if r == displaced:
            break
        c = prev
    match[row] = col
    owner[col] = row
    return True


def solve_max_matching(profit) -> Assignment:
    """Exact maximum-profit bijection between rows (clusters) and columns (classes)."""
    P = _check_square(profit)
    n = P.shape[0]
    cost = -P
    match, u, v = _hungarian_min(cost)
    # Every optimal matching uses only zero-reduced-cost edges of an optimal dual.
    scale = max(1.0, float(np.abs(P).max()))
    tight = (cost - u[:, None] - v[None, :]) <= 1e-9 * scale * n
    tight[np.arange(n), match] = True
    owner = np.empty(n, dtype=np.int64)
    owner[match] = np.arange(n)
    locked = np.zeros(n, dtype=bool)
    for r in range(n):
        for c in np.flatnonzero(tight[r]):
            if c == match[r]:
                break
            if locked[owner[c]]:
                continue
            if _try_reassign(tight, match, owner, locked, r, int(c)):
                break
        locked[r] = True
    mapping = tuple(int(c) for c in match)
    total = float(P[np.arange(n), match].sum())
    return Assignment(mapping=mapping, total_profit=total)
