"""Dense linear assignment: Jonker-Volgenant with a Hungarian fallback.

Both solvers work on square matrices; :func:`solve_lap` pads rectangular
problems with dummy rows or columns and reports pairs that land on a dummy
as unmatched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidCost


@dataclass(frozen=True)
class Assignment:
    """One-to-one matching between rows (view a) and columns (view b)."""

    pairs: tuple[tuple[int, int, float], ...]
    unmatched_a: tuple[int, ...] = ()
    unmatched_b: tuple[int, ...] = ()
    view_a: int | None = None
    view_b: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def total(self) -> float:
        return float(sum(c for _, _, c in self.pairs))

    def as_dict(self) -> dict[int, int]:
        return {l: m for l, m, _ in self.pairs}


def lapjv(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Jonker-Volgenant on a square matrix.

    Returns ``(x, v)``: x[i] is the column assigned to row i and v the column
    duals.
    """
    C = np.asarray(cost, dtype=np.float64)
    n = C.shape[0]
    x = np.full(n, -1, dtype=np.int64)
    y = np.full(n, -1, dtype=np.int64)
    v = np.empty(n)
    if n == 0:
        return x, v

    # column reduction, scanning columns from the last one
    matches = np.zeros(n, dtype=np.int64)
    for j in range(n - 1, -1, -1):
        i = int(np.argmin(C[:, j]))
        v[j] = C[i, j]
        matches[i] += 1
        if matches[i] == 1:
            x[i], y[j] = j, i
        elif v[j] < v[x[i]]:
            y[x[i]] = -1
            x[i], y[j] = j, i

    # reduction transfer from rows holding exactly one column
    free = []
    for i in range(n):
        if matches[i] == 0:
            free.append(i)
        elif matches[i] == 1:
            j1 = x[i]
            reduced = C[i] - v
            reduced[j1] = np.inf
            v[j1] -= reduced.min()

    # augmenting row reduction, two passes; near-tied rows can trade a column
    # back and forth with vanishing dual decrements, so each pass is bounded
    # and rows still free afterwards go to the exact shortest-path phase
    for _ in range(2):
        if not free:
            break
        todo, free = free, []
        k = 0
        budget = n * n
        while k < len(todo):
            if budget == 0:
                free.extend(todo[k:])
                break
            budget -= 1
            i = todo[k]
            k += 1
            reduced = C[i] - v
            j1, j2 = np.argpartition(reduced, 1)[:2]
            if reduced[j2] < reduced[j1]:
                j1, j2 = j2, j1
            umin, usub = reduced[j1], reduced[j2]
            i0 = y[j1]
            if umin < usub:
                v[j1] -= usub - umin
            elif i0 >= 0:
                j1 = j2
                i0 = y[j1]
            x[i], y[j1] = j1, i
            if i0 >= 0:
                x[i0] = -1
                if umin < usub:
                    k -= 1
                    todo[k] = i0
                else:
                    free.append(i0)

    for i in free:
        _augment(C, i, x, y, v)
    return x, v


def _augment(C: np.ndarray, row: int, x: np.ndarray, y: np.ndarray, v: np.ndarray) -> None:
    """Shortest augmenting path from a free row (Dijkstra on reduced costs)."""
    n = C.shape[0]
    d = C[row] - v
    pred = np.full(n, row, dtype=np.int64)
    ready = np.zeros(n, dtype=bool)
    while True:
        dm = np.where(ready, np.inf, d)
        mu = dm.min()
        cand = np.flatnonzero(dm == mu)
        unassigned = cand[y[cand] < 0]
        if unassigned.size:
            end = int(unassigned[0])
            break
        j1 = int(cand[0])
        ready[j1] = True
        i = y[j1]
        h = C[i, j1] - v[j1] - mu
        v2 = C[i] - v - h
        upd = ~ready & (v2 < d)
        d[upd] = v2[upd]
        pred[upd] = i
    v[ready] += d[ready] - mu
    while True:
        i = pred[end]
        y[end] = i
        end, x[i] = x[i], end
        if i == row:
            break


def hungarian(cost: np.ndarray) -> np.ndarray:
    """O(n^3) Hungarian method with potentials; returns the row-to-column map."""
    C = np.asarray(cost, dtype=np.float64)
    n = C.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = C[i0 - 1] - u[i0] - v[1:]
            free_cols = ~used[1:]
            better = free_cols & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free_cols, minv[1:], INF)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free_cols] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    x = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        x[p[j] - 1] = j - 1
    return x


def solve_lap(cost, method: str = "jv", view_a: int | None = None, view_b: int | None = None) -> Assignment:
    """Minimum-cost one-to-one assignment of min(n, m) pairs.

    Rectangular inputs are padded to square with a constant dummy cost of
    ten times the largest entry; any constant leaves the optimum unchanged.

    Args:
        cost: (n, m) matrix of finite costs.
        method: "jv" (default) or "hungarian".
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise InvalidCost("cost must be a 2D matrix")
    if not np.all(np.isfinite(C)):
        raise InvalidCost("cost matrix contains NaN or infinite entries")
    n, m = C.shape
    if n == 0 or m == 0:
        return Assignment((), tuple(range(n)), tuple(range(m)), view_a, view_b)
    size = max(n, m)
    if n != m:
        dummy = C.max() * 10.0
        padded = np.full((size, size), dummy)
        padded[:n, :m] = C
    else:
        padded = C
    if method == "jv":
        x, _ = lapjv(padded)
    elif method == "hungarian":
        x = hungarian(padded)
    else:
        raise ValueError(f"unknown LAP method {method!r}")
    pairs = tuple((i, int(x[i]), float(C[i, x[i]])) for i in range(n) if x[i] < m)
    matched_b = {j for _, j, _ in pairs}
    unmatched_a = tuple(i for i in range(n) if x[i] >= m)
    unmatched_b = tuple(j for j in range(m) if j not in matched_b)
    return Assignment(pairs, unmatched_a, unmatched_b, view_a, view_b)
