"""Agent similarity, average-linkage agglomeration, and level truncation.

Clients are compared either by Euclidean distance between their flat model
vectors or by 1 - cosine similarity between their last update directions.
The merge history (dendrogram) is cut K-1 generations below the root to
yield one nested partition of the clients per level.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

WEIGHT_METRIC = "weights"
GRADIENT_METRIC = "gradients"


class Merge(NamedTuple):
    left: int
    right: int
    height: float
    new_id: int
    size: int


@dataclass
class Dendrogram:
    """Full merge history: leaves are ids 0..n-1, merges mint n..2n-2."""

    n_leaves: int
    merges: list[Merge]

    @property
    def root_id(self) -> int:
        return 2 * self.n_leaves - 2

    def children(self) -> dict[int, tuple[int, int]]:
        return {m.new_id: (m.left, m.right) for m in self.merges}

    def leaf_members(self, node_id: int) -> list[int]:
        """Leaf ids under a node, ascending."""
        kids = self.children()
        out: list[int] = []
        stack = [node_id]
        while stack:
            node = stack.pop()
            if node < self.n_leaves:
                out.append(node)
            else:
                stack.extend(kids[node])
        return sorted(out)


@dataclass
class LevelAssignment:
    """Nested client partitions for levels 1..K; level K is a single group."""

    K: int
    groups: dict[int, list[list[int]]]
    group_of: dict[int, dict[int, int]] = field(init=False)

    def __post_init__(self) -> None:
        self.group_of = {
            level: {c: gi for gi, members in enumerate(gs) for c in members}
            for level, gs in self.groups.items()
        }

    @property
    def client_ids(self) -> list[int]:
        return sorted(self.group_of[self.K])


def weight_distance(w_a: np.ndarray, w_b: np.ndarray) -> float:
    """Euclidean distance between two flat parameter vectors."""
    if w_a.shape != w_b.shape:
        raise ValueError(f"length mismatch: {w_a.shape} vs {w_b.shape}")
    return float(np.linalg.norm(w_a - w_b))


def gradient_similarity(g_a: np.ndarray, g_b: np.ndarray) -> float:
    """Cosine of the angle between two update directions."""
    if g_a.shape != g_b.shape:
        raise ValueError(f"length mismatch: {g_a.shape} vs {g_b.shape}")
    na = float(np.linalg.norm(g_a))
    nb = float(np.linalg.norm(g_b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    return float(g_a @ g_b) / (na * nb)


def build_distance_matrix(clients: Sequence, metric: str = WEIGHT_METRIC) -> np.ndarray:
    """Symmetric pairwise dissimilarity over client states.

    `weights` uses Euclidean distance between personalized models; `gradients`
    uses 1 - cosine between recorded update deltas (requires every client to
    have one).
    """
    if len(clients) < 2:
        raise ValueError("need at least 2 clients to build a distance matrix")
    if metric == WEIGHT_METRIC:
        vectors = [c.w0 for c in clients]
    elif metric == GRADIENT_METRIC:
        vectors = []
        for c in clients:
            if c.last_delta is None:
                raise ValueError(
                    f"client {c.id} has no recorded update delta for gradient clustering"
                )
            vectors.append(c.last_delta)
    else:
        raise ValueError(f"unknown clustering metric {metric!r}")

    n = len(vectors)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if metric == WEIGHT_METRIC:
                val = weight_distance(vectors[i], vectors[j])
            else:
                val = 1.0 - gradient_similarity(vectors[i], vectors[j])
            d[i, j] = d[j, i] = val
    return d


def _check_distance_matrix(dm: np.ndarray) -> np.ndarray:
    d = np.asarray(dm, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"distance matrix must be square, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("distance matrix contains non-finite entries")
    if not np.allclose(d, d.T, atol=0.0):
        raise ValueError("distance matrix must be symmetric")
    if np.any(np.diag(d) != 0.0):
        raise ValueError("distance matrix must have a zero diagonal")
    return d


def agglomerate(dm: np.ndarray) -> Dendrogram:
    """Average-linkage (UPGMA) dendrogram via the Lance-Williams update.

    At each step the minimum-distance active pair merges; ties go to the
    lexicographically smallest (min_id, max_id).  Cluster-cluster distance is
    the unweighted mean of cross-pair leaf distances, maintained exactly by
    d(ab,c) = (n_a d(a,c) + n_b d(b,c)) / (n_a + n_b).
    """
    d = _check_distance_matrix(dm)
    n = d.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points to agglomerate")

    dist: dict[tuple[int, int], float] = {}
    for i in range(n):
        for j in range(i + 1, n):
            dist[(i, j)] = float(d[i, j])
    sizes = {i: 1 for i in range(n)}
    active = list(range(n))
    merges: list[Merge] = []
    next_id = n

    while len(active) > 1:
        best: tuple[float, int, int] | None = None
        for ai in range(len(active)):
            for aj in range(ai + 1, len(active)):
                i, j = active[ai], active[aj]
                key = (min(i, j), max(i, j))
                cand = (dist[key], key[0], key[1])
                if best is None or cand < best:
                    best = cand
        h, i, j = best
        size = sizes[i] + sizes[j]
        merges.append(Merge(i, j, h, next_id, size))
        for c in active:
            if c in (i, j):
                continue
            dic = dist[(min(i, c), max(i, c))]
            djc = dist[(min(j, c), max(j, c))]
            dist[(min(next_id, c), max(next_id, c))] = (
                sizes[i] * dic + sizes[j] * djc
            ) / size
        active = [c for c in active if c not in (i, j)]
        active.append(next_id)
        sizes[next_id] = size
        next_id += 1

    return Dendrogram(n, merges)


def truncate(dend: Dendrogram, K: int) -> LevelAssignment:
    """Keep the top K generations of the dendrogram as nested level groups.

    The root is the single level-K group; each step down a level expands every
    internal frontier node into its two merge children.  A leaf reached early
    stays its own group at every remaining lower level.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    kids = dend.children()
    frontier: list[int] = [dend.root_id]
    groups: dict[int, list[list[int]]] = {}
    for depth in range(K):
        level = K - depth
        groups[level] = [dend.leaf_members(node) for node in frontier]
        nxt: list[int] = []
        for node in frontier:
            if node < dend.n_leaves:
                nxt.append(node)
            else:
                nxt.extend(kids[node])
        frontier = nxt
    return LevelAssignment(K, groups)


def format_dendrogram(dend: Dendrogram) -> str:
    """Nested text rendering (ids, merge heights, member lists) for plotting."""
    kids = dend.children()
    lines = [f"dendrogram leaves={dend.n_leaves}"]
    heights = {m.new_id: m.height for m in dend.merges}

    def visit(node: int, indent: int) -> None:
        pad = "  " * indent
        if node < dend.n_leaves:
            lines.append(f"{pad}leaf id={node}")
            return
        members = ",".join(str(c) for c in dend.leaf_members(node))
        lines.append(
            f"{pad}node id={node} height={heights[node]!r} members=[{members}]"
        )
        left, right = kids[node]
        visit(left, indent + 1)
        visit(right, indent + 1)

    visit(dend.root_id, 0)
    return "\n".join(lines) + "\n"
