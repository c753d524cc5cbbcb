"""Minimum-cost bipartite assignment of queries to ground-truth objects."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, DimensionError, NumericalError


@dataclass
class MatchResult:
    pairs: list  # (query index, gt index), sorted by gt index
    unmatched: list  # query indices

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=np.int64)


def hungarian_match(cost) -> MatchResult:
    """Assign every ground truth (column) to a distinct query (row).

    Shortest-augmenting-path Hungarian method with row/column potentials,
    O(g^2 q) for a ``q x g`` cost matrix with ``g <= q``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError(f"cost matrix must be 2-D, got shape {cost.shape}")
    q, g = cost.shape
    if g > q:
        raise CapacityError(f"{g} ground-truth objects exceed {q} queries")
    if not np.isfinite(cost).all():
        raise NumericalError("cost matrix has non-finite entries")
    if g == 0:
        return MatchResult([], list(range(q)))

    a = cost.T  # gt rows, query columns
    n, m = g, q
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # column -> row (1-based, 0 = free)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[owner[used_idx]] += delta
            v[used_idx] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    pairs = sorted((j - 1, int(owner[j]) - 1) for j in range(1, m + 1) if owner[j])
    pairs.sort(key=lambda p: p[1])
    matched = {p[0] for p in pairs}
    return MatchResult(pairs, [i for i in range(q) if i not in matched])


def assignment_cost(cost, match: MatchResult) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[i, j] for i, j in match.pairs))
