"""Deterministic clustering primitives for the diversity selectors.

Randomness comes only from numpy's counter-based Philox bit generator,
seeded explicitly per k-means restart (``seed + restart``). Every tie in
this module resolves to the lowest index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from coldstart.errors import ConfigError, InputError, ThresholdTooCoarseError
from coldstart.features import FeatureTable
from coldstart.rng import philox

MAX_ITER = 300


@dataclass
class Clustering:
    k: int
    assignment: np.ndarray
    centers: np.ndarray
    wcss: float
    history: list[float] = field(default_factory=list)
    n_iter: int = 0

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        counts = np.bincount(self.assignment, minlength=self.k)
        if len(counts) != self.k or (counts == 0).any():
            raise InputError("every cluster must be non-empty and labels must lie in [0, k)")
        if not np.isfinite(self.centers).all():
            raise InputError("cluster centers must be finite")

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == c)


def _as_matrix(data) -> np.ndarray:
    if isinstance(data, FeatureTable):
        return data.values
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise InputError(f"expected a 2D matrix of feature rows, got shape {x.shape}")
    return x


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


def pairwise_euclidean(data) -> np.ndarray:
    x = _as_matrix(data)
    d = np.sqrt(_sq_dists(x, x))
    np.fill_diagonal(d, 0.0)
    return d


def cosine_sim(a, b) -> float:
    """Cosine similarity; defined as 0 when either vector is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"cosine_sim dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def cosine_matrix(data) -> np.ndarray:
    x = _as_matrix(data)
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms == 0, 1.0, norms)
    unit = x / safe[:, None]
    sim = unit @ unit.T
    zero = norms == 0
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    return sim


# --------------------------------------------------------------------------
# k-means
# --------------------------------------------------------------------------

def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding with ``2 + floor(ln k)`` candidates per step."""
    n = len(x)
    n_trials = 2 + int(math.log(k))
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every remaining point duplicates a chosen center
            cand = next(i for i in range(n) if i not in chosen)
            chosen.append(cand)
            closest = np.minimum(closest, _sq_dists(x, x[[cand]])[:, 0])
            continue
        draws = rng.random(n_trials) * total
        cands = np.minimum(np.searchsorted(np.cumsum(closest), draws, side="right"), n - 1)
        cand_d = np.minimum(closest[None, :], _sq_dists(x[cands], x))
        best = int(np.argmin(cand_d.sum(axis=1)))
        chosen.append(int(cands[best]))
        closest = cand_d[best]
    return x[chosen].copy()


def _repair_empty(x, labels, centers, k):
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        d = ((x - centers[labels]) ** 2).sum(axis=1)
        d[counts[labels] <= 1] = -1.0
        far = int(np.argmax(d))
        counts[labels[far]] -= 1
        labels[far] = j
        counts[j] = 1
        centers[j] = x[far]
    return labels


def _lloyd(x: np.ndarray, centers: np.ndarray, k: int):
    labels = None
    history = []
    n_iter = 0
    for n_iter in range(1, MAX_ITER + 1):
        new = np.argmin(_sq_dists(x, centers), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = _repair_empty(x, new, centers, k)
        centers = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
        history.append(float(((x - centers[labels]) ** 2).sum()))
    wcss = float(((x - centers[labels]) ** 2).sum())
    return labels, centers, wcss, history, n_iter


def kmeans(data, k: int, seed: int = 0, n_init: int = 10) -> Clustering:
    """Lloyd's k-means with k-means++ seeding and ``n_init`` seeded restarts.

    Restart ``r`` uses ``philox(seed + r)``. The restart with the lowest
    within-cluster sum of squares wins; equal WCSS keeps the earlier one.
    ``history`` records the WCSS after every center update of the winner.
    """
    x = _as_matrix(data)
    n = len(x)
    if k < 1 or k > n:
        raise ConfigError(f"k-means needs 1 <= k <= rows, got k={k} with {n} rows")
    if n_init < 1:
        raise ConfigError(f"n_init must be positive, got {n_init}")
    best = None
    for r in range(n_init):
        centers = _kmeans_pp(x, k, philox(seed + r))
        labels, centers, wcss, history, n_iter = _lloyd(x, centers, k)
        if best is None or wcss < best.wcss:
            best = Clustering(k, labels, centers, wcss, history, n_iter)
    return best


# --------------------------------------------------------------------------
# BIRCH
# --------------------------------------------------------------------------

@dataclass
class CFEntry:
    """A clustering feature (count, linear sum, squared-norm sum).

    Leaf entries keep the row indices they summarize; inner entries point
    at a child node.
    """

    n: int
    linear_sum: np.ndarray
    squared_sum: float
    child: "CFNode | None" = None
    members: list[int] = field(default_factory=list)

    @classmethod
    def of_point(cls, x: np.ndarray, index: int) -> "CFEntry":
        return cls(1, x.copy(), float(x @ x), None, [index])

    def merged(self, other: "CFEntry") -> "CFEntry":
        return CFEntry(
            self.n + other.n,
            self.linear_sum + other.linear_sum,
            self.squared_sum + other.squared_sum,
            None,
            self.members + other.members,
        )

    @property
    def centroid(self) -> np.ndarray:
        return self.linear_sum / self.n

    @property
    def radius(self) -> float:
        c = self.centroid
        return math.sqrt(max(self.squared_sum / self.n - float(c @ c), 0.0))


@dataclass
class CFNode:
    is_leaf: bool
    entries: list[CFEntry] = field(default_factory=list)

    def summary(self) -> CFEntry:
        total = self.entries[0]
        for e in self.entries[1:]:
            total = total.merged(e)
        return CFEntry(total.n, total.linear_sum, total.squared_sum, self, [])


def _closest(entries, x) -> int:
    d = [float(((e.centroid - x) ** 2).sum()) for e in entries]
    return int(np.argmin(d))


class CFTree:
    def __init__(self, threshold: float, branching: int):
        if threshold < 0:
            raise ConfigError(f"BIRCH threshold must be non-negative, got {threshold}")
        if branching < 2:
            raise ConfigError(f"BIRCH branching factor must be at least 2, got {branching}")
        self.threshold = threshold
        self.branching = branching
        self.root = CFNode(is_leaf=True)

    def insert(self, x: np.ndarray, index: int) -> None:
        split = self._insert(self.root, CFEntry.of_point(x, index))
        if split is not None:
            self.root = CFNode(is_leaf=False, entries=list(split))

    def _insert(self, node: CFNode, entry: CFEntry):
        x = entry.centroid
        if node.is_leaf:
            if node.entries:
                i = _closest(node.entries, x)
                trial = node.entries[i].merged(entry)
                if trial.radius <= self.threshold:
                    node.entries[i] = trial
                    return None
            node.entries.append(entry)
        else:
            i = _closest(node.entries, x)
            target = node.entries[i]
            split = self._insert(target.child, entry)
            if split is None:
                node.entries[i] = CFEntry(
                    target.n + entry.n,
                    target.linear_sum + entry.linear_sum,
                    target.squared_sum + entry.squared_sum,
                    target.child,
                )
                return None
            node.entries[i:i + 1] = list(split)
        if len(node.entries) > self.branching:
            return self._split(node)
        return None

    def _split(self, node: CFNode):
        cents = np.stack([e.centroid for e in node.entries])
        d = _sq_dists(cents, cents)
        a, b = (int(v) for v in np.unravel_index(int(np.argmax(d)), d.shape))
        if a == b:
            b = len(node.entries) - 1
        left, right = CFNode(node.is_leaf), CFNode(node.is_leaf)
        for i, e in enumerate(node.entries):
            to_left = i == a or (i != b and d[i, a] <= d[i, b])
            (left if to_left else right).entries.append(e)
        return left.summary(), right.summary()

    def leaf_entries(self) -> list[CFEntry]:
        out = []

        def walk(node):
            for e in node.entries:
                if node.is_leaf:
                    out.append(e)
                else:
                    walk(e.child)

        walk(self.root)
        return out

    @property
    def n(self) -> int:
        return sum(e.n for e in self.root.entries)


def _average_linkage(centroids: np.ndarray, weights: np.ndarray, k: int) -> list[list[int]]:
    """Weighted average-linkage agglomeration of leaf centroids down to ``k`` groups."""
    groups = [[i] for i in range(len(centroids))]
    size = weights.astype(np.float64).copy()
    dist = np.sqrt(_sq_dists(centroids, centroids))
    active = list(range(len(groups)))
    while len(active) > k:
        sub = dist[np.ix_(active, active)]
        sub[np.tril_indices(len(active))] = np.inf
        a, b = np.unravel_index(int(np.argmin(sub)), sub.shape)
        i, j = active[a], active[b]
        # Lance-Williams update for average linkage
        merged = (size[i] * dist[i] + size[j] * dist[j]) / (size[i] + size[j])
        dist[i, :] = merged
        dist[:, i] = merged
        dist[i, i] = 0.0
        size[i] += size[j]
        groups[i].extend(groups[j])
        active.remove(j)
    return [groups[i] for i in active]


def birch_cluster(data, k: int, threshold: float = 0.5, branching: int = 50) -> Clustering:
    """BIRCH: one CF-tree pass in row order, then average-linkage down to ``k``.

    Final clusters are numbered by the smallest row index they contain.
    """
    x = _as_matrix(data)
    n = len(x)
    if k < 1 or k > n:
        raise ConfigError(f"BIRCH needs 1 <= k <= rows, got k={k} with {n} rows")
    if k == n:
        # the only partition into n non-empty clusters, whatever the tree does
        return Clustering(k, np.arange(n), x.copy(), 0.0)
    leaves = build_cf_tree(x, threshold, branching).leaf_entries()
    if len(leaves) < k:
        raise ThresholdTooCoarseError(
            f"BIRCH produced {len(leaves)} subclusters for k={k}; "
            f"use a smaller threshold than {threshold}"
        )
    groups = _average_linkage(
        np.stack([e.centroid for e in leaves]), np.array([e.n for e in leaves]), k
    )
    members = [sorted(m for g in grp for m in leaves[g].members) for grp in groups]
    members.sort(key=lambda m: m[0])
    labels = np.empty(n, dtype=np.int64)
    for c, m in enumerate(members):
        labels[m] = c
    centers = np.stack([x[m].mean(axis=0) for m in members])
    wcss = float(((x - centers[labels]) ** 2).sum())
    return Clustering(k, labels, centers, wcss)


def build_cf_tree(data, threshold: float = 0.5, branching: int = 50) -> CFTree:
    x = _as_matrix(data)
    tree = CFTree(threshold, branching)
    for i, row in enumerate(x):
        tree.insert(row, i)
    return tree
