"""Tree decoding from arc scores.

``Y_arc`` is N x (N+1): row ``i`` scores every head candidate for word
``i + 1`` and column 0 is the root. Head vectors are 1-based with 0 = root.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .treebank import validate_heads

MAX_BRUTE_FORCE = 8


@dataclass
class PredictedTree:
    heads: list[int]
    rels: list[int] | None = None
    is_tree: bool = True


def _as_array(Y) -> np.ndarray:
    Y = np.asarray(getattr(Y, "data", Y), dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] != Y.shape[0] + 1:
        raise ValueError(f"arc scores must be N x (N+1), got {Y.shape}")
    return Y


def mask_self_arcs(Y) -> np.ndarray:
    Y = _as_array(Y).copy()
    n = Y.shape[0]
    Y[np.arange(n), np.arange(1, n + 1)] = -np.inf
    return Y


def tree_score(Y, heads) -> float:
    Y = _as_array(Y)
    return float(sum(Y[i, h] for i, h in enumerate(heads)))


def greedy_decode(Y) -> PredictedTree:
    """Row-wise argmax after masking self-arcs; may not yield a tree."""
    heads = [int(h) for h in np.argmax(mask_self_arcs(Y), axis=1)]
    return PredictedTree(heads, None, validate_heads(heads).ok)


def _find_cycle(heads: np.ndarray) -> list[int] | None:
    n = heads.shape[0]
    color = np.zeros(n, dtype=np.int8)
    color[0] = 2
    for start in range(1, n):
        path = []
        v = start
        while color[v] == 0:
            color[v] = 1
            path.append(v)
            v = heads[v]
        if color[v] == 1:
            return path[path.index(v):]
        for u in path:
            color[u] = 2
    return None


def _chu_liu_edmonds(S: np.ndarray) -> np.ndarray:
    """Maximum arborescence rooted at node 0; ``S[dep, head]``, n x n."""
    n = S.shape[0]
    S = S.copy()
    np.fill_diagonal(S, -np.inf)
    S[0, :] = -np.inf
    heads = np.argmax(S, axis=1)
    heads[0] = 0
    cycle = _find_cycle(heads)
    if cycle is None:
        return heads
    cyc = np.array(sorted(cycle))
    in_cycle = np.zeros(n, dtype=bool)
    in_cycle[cyc] = True
    rest = np.flatnonzero(~in_cycle)  # starts with the root
    m = rest.shape[0]
    S2 = np.full((m + 1, m + 1), -np.inf)
    S2[:m, :m] = S[np.ix_(rest, rest)]
    leave = S[np.ix_(rest, cyc)]                      # cycle node heads an outside word
    leave_from = cyc[np.argmax(leave, axis=1)]
    S2[:m, m] = leave.max(axis=1)
    kept = S[cyc, heads[cyc]]
    enter = S[np.ix_(cyc, rest)] - kept[:, None]      # outside head breaks into the cycle
    enter_at = cyc[np.argmax(enter, axis=0)]
    S2[m, :m] = enter.max(axis=0)
    sub = _chu_liu_edmonds(S2)
    out = heads.copy()
    for k, v in enumerate(rest):
        if v == 0:
            continue
        out[v] = rest[sub[k]] if sub[k] < m else leave_from[k]
    j = sub[m]
    out[enter_at[j]] = rest[j]
    return out


def _mst_heads(Y: np.ndarray) -> np.ndarray:
    n = Y.shape[0] + 1
    S = np.full((n, n), -np.inf)
    S[1:, :] = Y
    return _chu_liu_edmonds(S)[1:]


def mst_decode(Y) -> PredictedTree:
    """Highest-scoring single-rooted arborescence (Chu-Liu/Edmonds).

    If the unconstrained optimum attaches several words to the root, the
    problem is re-solved once per candidate root word with every other root
    arc removed, keeping the best (first on ties).
    """
    Y = mask_self_arcs(Y)
    N = Y.shape[0]
    heads = _mst_heads(Y)
    if np.count_nonzero(heads == 0) > 1:
        best, best_score = None, -np.inf
        for r in range(N):
            Yr = Y.copy()
            Yr[:, 0] = -np.inf
            Yr[r, 0] = Y[r, 0]
            cand = _mst_heads(Yr)
            s = tree_score(Y, cand)
            if s > best_score:
                best, best_score = cand, s
        heads = best
    return PredictedTree([int(h) for h in heads], None, True)


def enumerate_arborescences(N: int, single_root: bool = False) -> Iterator[tuple[int, ...]]:
    """All head vectors over N words forming a tree rooted at 0, in lexicographic order.

    Heads are assigned word by word; an assignment is pruned as soon as it
    closes a cycle, so every completed vector is acyclic and hence rooted.
    """
    heads = [0] * N

    def closes_cycle(dep: int) -> bool:
        v = heads[dep - 1]
        while v != 0 and v <= dep:
            if v == dep:
                return True
            v = heads[v - 1]
        return False

    def rec(i: int) -> Iterator[tuple[int, ...]]:
        if i == N:
            yield tuple(heads)
            return
        root_taken = single_root and 0 in heads[:i]
        for h in range(N + 1):
            if h == i + 1 or (h == 0 and root_taken):
                continue
            heads[i] = h
            if not closes_cycle(i + 1):
                yield from rec(i + 1)
        heads[i] = 0

    yield from rec(0)


def brute_force_mst(Y, single_root: bool = True) -> PredictedTree:
    """Exhaustive search over arborescences; ties keep the lexicographically first."""
    Y = mask_self_arcs(Y)
    N = Y.shape[0]
    if N > MAX_BRUTE_FORCE:
        raise ValueError(f"brute force limited to N <= {MAX_BRUTE_FORCE}, got {N}")
    best, best_score = None, -np.inf
    rows = np.arange(N)
    for heads in enumerate_arborescences(N, single_root=single_root):
        s = float(Y[rows, heads].sum())
        if s > best_score:
            best, best_score = heads, s
    return PredictedTree(list(best), None, True)


def assign_labels(Y_rel, heads) -> list[int]:
    """Relation at each predicted head: ``argmax_r Y_rel[i, heads[i], r]``."""
    Y_rel = np.asarray(getattr(Y_rel, "data", Y_rel))
    return [int(np.argmax(Y_rel[i, h])) for i, h in enumerate(heads)]


def decode_tree(Y_arc, Y_rel, mode: str = "greedy") -> PredictedTree:
    if mode == "greedy":
        tree = greedy_decode(Y_arc)
    elif mode == "mst":
        tree = mst_decode(Y_arc)
    else:
        raise ValueError(f"unknown decoding mode {mode!r}")
    tree.rels = assign_labels(Y_rel, tree.heads)
    return tree
