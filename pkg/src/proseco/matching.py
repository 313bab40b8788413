"""Exact minimum-cost bipartite assignment and the two matching costs.

``hungarian`` solves the rectangular assignment problem with the
shortest-augmenting-path form of the Hungarian method (row potentials ``u``,
column potentials ``v``). Among all optimal assignments it returns the one
whose pair list is lexicographically smallest, which makes training runs
reproducible even when costs tie.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .boxes import giou_loss_matrix, l1_matrix
from .errors import ContractError


@dataclass
class MatchAssignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    total_cost: float = 0.0

    def targets(self, n_sources: int | None = None) -> np.ndarray:
        """Array mapping source index -> target index (-1 if unmatched)."""
        n = n_sources if n_sources is not None else (max((s for s, _ in self.pairs), default=-1) + 1)
        out = np.full(n, -1, dtype=np.int64)
        for s, t in self.pairs:
            out[s] = t
        return out

    def __len__(self) -> int:
        return len(self.pairs)


def _solve_square(c: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (row->col, u, v) for a square cost matrix."""
    n = c.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    a = np.zeros((n + 1, n + 1))
    a[1:, 1:] = c
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    row_to_col[p[1:] - 1] = np.arange(n)
    return row_to_col, u[1:], v[1:]


def _lexicographic_min(tight: np.ndarray, match: np.ndarray, rows: int) -> np.ndarray:
    """Smallest perfect matching (row-major lexicographic) inside ``tight``.

    ``match`` is any perfect matching using tight edges only.
    """
    n = len(match)
    match = match.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[match] = np.arange(n)
    fixed_cols = np.zeros(n, dtype=bool)
    for i in range(rows):
        for j in np.flatnonzero(tight[i] & ~fixed_cols):
            if match[i] == j:
                break
            # alternating path from owner[j] to match[i] avoiding fixed rows, row i and column j
            start, goal = owner[j], match[i]
            prev: dict[int, int] = {}
            queue = deque([start])
            seen = fixed_cols.copy()
            seen[j] = True
            found = False
            while queue and not found:
                r = queue.popleft()
                for col in np.flatnonzero(tight[r] & ~seen):
                    seen[col] = True
                    prev[col] = r
                    if col == goal:
                        found = True
                        break
                    queue.append(owner[col])
            if not found:
                continue
            col = goal
            while True:
                r = prev[col]
                nxt = match[r]
                match[r] = col
                owner[col] = r
                if r == start:
                    break
                col = nxt
            match[i] = j
            owner[j] = i
            break
        fixed_cols[match[i]] = True
    return match


def hungarian(cost) -> MatchAssignment:
    """Minimum-total-cost injective assignment covering ``min(rows, cols)`` pairs."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ContractError(f"cost matrix must be 2-D, got shape {c.shape}")
    if c.size == 0:
        return MatchAssignment([], 0.0)
    if not np.all(np.isfinite(c)):
        raise ContractError("cost matrix has non-finite entries")
    flipped = c.shape[0] > c.shape[1]
    work = c.T if flipped else c
    rows, cols = work.shape
    square = np.zeros((cols, cols))
    square[:rows] = work
    match, u, v = _solve_square(square)
    scale = max(1.0, float(np.abs(square).max()))
    tight = square - u[:, None] - v[None, :] <= 1e-9 * scale * cols
    tight[np.arange(cols), match] = True
    match = _lexicographic_min(tight, match, rows)
    pairs = [(i, int(match[i])) for i in range(rows)]
    if flipped:
        pairs = sorted((t, s) for s, t in pairs)
    total = float(sum(c[s, t] for s, t in pairs))
    return MatchAssignment(pairs, total)


def _embeddings(ps) -> np.ndarray:
    return np.asarray(ps.embeddings.data, dtype=np.float64)


def _boxes(ps) -> np.ndarray:
    return np.asarray(ps.boxes.data, dtype=np.float64)


def proposal_cost(teacher, student, cfg) -> np.ndarray:
    """Teacher-by-student matching cost: ``-sim + coord + giou`` (weighted).

    Built from detached values; gradients never flow through it.
    """
    zt, zs = _embeddings(teacher), _embeddings(student)
    if zt.shape[0] != zs.shape[0]:
        raise ContractError(f"proposal count mismatch: teacher {zt.shape[0]} vs student {zs.shape[0]}")
    nt = np.maximum(np.linalg.norm(zt, axis=1, keepdims=True), 1e-12)
    ns = np.maximum(np.linalg.norm(zs, axis=1, keepdims=True), 1e-12)
    cos = (zt / nt) @ (zs / ns).T
    bt, bs = _boxes(teacher), _boxes(student)
    return (
        -cfg.lambda_sim * cos
        + cfg.lambda_coord * l1_matrix(bt, bs)
        + cfg.lambda_giou * giou_loss_matrix(bt, bs)
    )


def box_cost(ss_boxes, student, cfg) -> np.ndarray:
    """Selective-Search-box-by-student-box matching cost (``K x N``)."""
    ss = np.asarray(getattr(ss_boxes, "data", ss_boxes), dtype=np.float64).reshape(-1, 4)
    bs = _boxes(student)
    if len(ss) > len(bs):
        raise ContractError(f"K={len(ss)} sampled boxes exceed N={len(bs)} predictions")
    return cfg.lambda_coord * l1_matrix(ss, bs) + cfg.lambda_giou * giou_loss_matrix(ss, bs)


def brute_force(cost) -> tuple[float, list[tuple[int, int]]]:
    """Exhaustive minimum over all injective maps; exponential, for oracles only."""
    from itertools import permutations

    c = np.asarray(cost, dtype=np.float64)
    if c.size == 0:
        return 0.0, []
    flipped = c.shape[0] > c.shape[1]
    work = c.T if flipped else c
    rows, cols = work.shape
    best, best_pairs = np.inf, []
    for perm in permutations(range(cols), rows):
        total = sum(work[i, perm[i]] for i in range(rows))
        if total < best:
            best, best_pairs = total, [(i, perm[i]) for i in range(rows)]
    if flipped:
        best_pairs = sorted((t, s) for s, t in best_pairs)
    return float(best), best_pairs
