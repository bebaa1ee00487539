"""
Two-way clustering of row embeddings into proxy groups
k-means (k-means++ seeding, Lloyd iterations, transfer refinement), agglomerative clustering
(ward / average / complete) and BIRCH (CF-tree followed by Ward over the leaf
subclusters). Every method returns a ClusterResult; assign_proxy turns it
into oriented proxy labels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from modules.errors import ConfigError, DegenerateClusterError, ShapeError

logger = logging.getLogger(__name__)

METHODS = ("kmeans", "hierarchical", "birch")
LINKAGES = ("ward", "average", "complete")


@dataclass(frozen=True)
class ClusteringConfig:
    standardize: bool = True
    restarts: int = 10
    max_iter: int = 300
    linkage: str = "ward"
    threshold: float = 0.5
    scale_threshold: bool = True
    branching: int = 50
    exact_limit: int = 256
    dense_limit: int = 5000

    def __post_init__(self) -> None:
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.linkage not in LINKAGES:
            raise ValueError(f"linkage must be one of {LINKAGES}, got {self.linkage}")
        if self.threshold <= 0:
            raise ValueError(f"BIRCH threshold must be > 0, got {self.threshold}")
        if self.branching < 2:
            raise ValueError(f"BIRCH branching must be >= 2, got {self.branching}")


@dataclass
class ClusterResult:
    labels: np.ndarray
    ids: np.ndarray
    method: str
    seed: int | None = None
    inertia: float | None = None
    degenerate: bool = False
    inertia_trace: list[float] = field(default_factory=list)
    merges: list[tuple[int, int, float]] = field(default_factory=list)
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def sizes(self) -> dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


@dataclass
class ProxyLabels:
    """Per-row proxy group; group 0 is the larger cluster"""

    ids: np.ndarray
    proxy: np.ndarray
    sizes: tuple[int, int]
    method: str

    def aligned(self, ids: np.ndarray) -> np.ndarray:
        lookup = {int(i): int(p) for i, p in zip(self.ids, self.proxy)}
        try:
            return np.array([lookup[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"row id {exc.args[0]} has no proxy label") from None


def _as_points(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"points must be a 2-d matrix, got shape {points.shape}")
    if not np.isfinite(points).all():
        raise ValueError("points contain non-finite values")
    return points


def _row_ids(ids: np.ndarray | None, n: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)


def _sq_dist(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (points**2).sum(1)[:, None] - 2.0 * points @ centers.T + (centers**2).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def sse(points: np.ndarray, labels: np.ndarray) -> float:
    """Within-cluster sum of squares with centroids as cluster means"""
    total = 0.0
    for label in np.unique(labels):
        members = points[labels == label]
        total += float(((members - members.mean(axis=0)) ** 2).sum())
    return total


# ---------------------------------------------------------------- k-means

def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    for _ in range(1, k):
        d2 = _sq_dist(points, points[chosen]).min(axis=1)
        total = d2.sum()
        chosen.append(int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=d2 / total)))
    return points[chosen].copy()


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int) -> tuple[np.ndarray, list[float]]:
    labels: np.ndarray | None = None
    trace: list[float] = []
    rows = np.arange(len(points))
    for _ in range(max_iter):
        d2 = _sq_dist(points, centers)
        assigned = d2.argmin(axis=1)
        trace.append(float(d2[rows, assigned].sum()))
        if labels is not None and np.array_equal(assigned, labels):
            break
        labels = assigned
        for j in range(len(centers)):
            members = labels == j
            if members.any():
                centers[j] = points[members].mean(axis=0)
            else:
                # empty cluster: re-seed from the point farthest from its centroid
                centers[j] = points[int(d2[rows, labels].argmax())]
    assert labels is not None
    return labels, trace


def _transfer_refine(points: np.ndarray, labels: np.ndarray, k: int, max_passes: int) -> np.ndarray:
    """Single-point transfers: move a point whenever the move lowers the SSE.

    Each pass screens all points against the current centroids, then applies
    the exact move test point by point with centroids updated after every move.
    """
    labels = labels.copy()
    rows = np.arange(len(points))
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    sums = np.zeros((k, points.shape[1]))
    np.add.at(sums, labels, points)

    def gains(i: int) -> tuple[int, float, float]:
        a = labels[i]
        d2 = ((sums / np.maximum(counts, 1.0)[:, None] - points[i]) ** 2).sum(axis=1)
        addition = counts / (counts + 1.0) * d2
        addition[a] = np.inf
        b = int(addition.argmin())
        return b, float(addition[b]), float(counts[a] / (counts[a] - 1.0) * d2[a])

    for _ in range(max_passes):
        d2 = _sq_dist(points, sums / np.maximum(counts, 1.0)[:, None])
        own = counts[labels]
        removal = np.where(own > 1, own / np.maximum(own - 1.0, 1.0) * d2[rows, labels], -np.inf)
        addition = counts[None, :] / (counts[None, :] + 1.0) * d2
        addition[rows, labels] = np.inf
        candidates = np.flatnonzero(addition.min(axis=1) < removal - 1e-12 * np.maximum(1.0, removal))
        moved = False
        for i in candidates:
            a = labels[i]
            if counts[a] <= 1:
                continue
            b, add, remove = gains(i)
            if add < remove - 1e-12 * max(1.0, remove):
                counts[a] -= 1.0
                counts[b] += 1.0
                sums[a] -= points[i]
                sums[b] += points[i]
                labels[i] = b
                moved = True
        if not moved:
            break
    return labels


def kmeans(
    points: np.ndarray,
    k: int = 2,
    restarts: int = 10,
    seed: int = 0,
    max_iter: int = 300,
    ids: np.ndarray | None = None,
) -> ClusterResult:
    """Best-of-restarts k-means: k-means++ seeding, Lloyd iterations, then single-point transfers"""
    points = _as_points(points)
    n = len(points)
    if n < k:
        raise ValueError(f"k-means needs at least k={k} points, got {n}")
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")

    rng = np.random.default_rng(seed)
    best: tuple[float, np.ndarray, list[float]] | None = None
    for _ in range(restarts):
        labels, trace = _lloyd(points, _kmeans_pp(points, k, rng), max_iter)
        labels = _transfer_refine(points, labels, k, max_iter)
        inertia = sse(points, labels)
        if inertia < trace[-1]:
            trace.append(inertia)
        if best is None or inertia < best[0]:
            best = (inertia, labels, trace)
    assert best is not None
    inertia, labels, trace = best

    degenerate = len(np.unique(labels)) < k
    if degenerate:
        logger.warning("k-means found fewer than %d non-empty clusters", k)
    return ClusterResult(
        labels=labels.astype(np.int64), ids=_row_ids(ids, n), method="kmeans", seed=seed,
        inertia=inertia, degenerate=degenerate, inertia_trace=trace,
        params={"k": k, "restarts": restarts, "max_iter": max_iter},
    )


# ---------------------------------------------------------------- agglomerative

def _initial_dissimilarity(points: np.ndarray, sizes: np.ndarray, linkage: str) -> np.ndarray:
    d2 = _sq_dist(points, points)
    if linkage == "ward":
        D = sizes[:, None] * sizes[None, :] / (sizes[:, None] + sizes[None, :]) * d2
    else:
        D = np.sqrt(d2)
    np.fill_diagonal(D, np.inf)
    return D


def _lance_williams(D: np.ndarray, i: int, j: int, sizes: np.ndarray, linkage: str) -> np.ndarray:
    """Dissimilarity of every cluster to the union of clusters i and j"""
    ni, nj = sizes[i], sizes[j]
    if linkage == "ward":
        nk = sizes
        return ((ni + nk) * D[i] + (nj + nk) * D[j] - nk * D[i, j]) / (ni + nj + nk)
    if linkage == "average":
        return (ni * D[i] + nj * D[j]) / (ni + nj)
    return np.maximum(D[i], D[j])


def _merge_rows(D: np.ndarray, i: int, j: int, sizes: np.ndarray, linkage: str) -> None:
    """Fold cluster j into cluster i (i < j) inside the dense matrix"""
    row = _lance_williams(D, i, j, sizes, linkage)
    D[i, :] = row
    D[:, i] = row
    D[i, i] = np.inf
    D[j, :] = np.inf
    D[:, j] = np.inf
    sizes[i] += sizes[j]
    sizes[j] = 0


def _greedy_merges(points: np.ndarray, sizes: np.ndarray, linkage: str, n_merges: int) -> list[tuple[int, int, float]]:
    """Exact agglomeration: always merge the closest pair, smallest index pair on ties.

    A cluster is named by its smallest member index.
    """
    n = len(points)
    sizes = sizes.astype(np.float64).copy()
    D = _initial_dissimilarity(points, sizes, linkage)
    upper = np.triu(np.ones((n, n), dtype=bool), 1)
    merges = []
    for _ in range(n_merges):
        # row-major argmin over the upper triangle is the smallest index pair among ties
        i, j = divmod(int(np.argmin(np.where(upper, D, np.inf))), n)
        height = float(D[i, j])
        _merge_rows(D, i, j, sizes, linkage)
        merges.append((i, j, height))
    return merges


def _ward_nn_chain(centroids: np.ndarray, sizes: np.ndarray) -> list[tuple[int, int, float]]:
    """Nearest-neighbour chain Ward over centroids; memory linear in the number of clusters"""
    n = len(centroids)
    centroids = centroids.copy()
    sizes = sizes.astype(np.float64).copy()
    active = np.ones(n, dtype=bool)
    merges: list[tuple[int, int, float]] = []
    chain: list[int] = []
    while len(merges) < n - 1:
        if not chain:
            chain.append(int(np.flatnonzero(active)[0]))
        a = chain[-1]
        diff = centroids - centroids[a]
        cost = sizes * sizes[a] / (sizes + sizes[a]) * (diff * diff).sum(axis=1)
        cost[~active] = np.inf
        cost[a] = np.inf
        b = int(np.argmin(cost))
        if len(chain) > 1 and cost[chain[-2]] <= cost[b]:
            b = chain[-2]
        if len(chain) > 1 and b == chain[-2]:
            chain.pop()
            chain.pop()
            lo, hi = min(a, b), max(a, b)
            total = sizes[lo] + sizes[hi]
            centroids[lo] = (sizes[lo] * centroids[lo] + sizes[hi] * centroids[hi]) / total
            sizes[lo] = total
            active[hi] = False
            merges.append((lo, hi, float(cost[b])))
        else:
            chain.append(b)
    return merges


def _dense_nn_chain(points: np.ndarray, linkage: str) -> list[tuple[int, int, float]]:
    n = len(points)
    sizes = np.ones(n)
    D = _initial_dissimilarity(points, sizes, linkage)
    merges: list[tuple[int, int, float]] = []
    chain: list[int] = []
    active = np.ones(n, dtype=bool)
    while len(merges) < n - 1:
        if not chain:
            chain.append(int(np.flatnonzero(active)[0]))
        a = chain[-1]
        b = int(np.argmin(D[a]))
        if len(chain) > 1 and D[a, chain[-2]] <= D[a, b]:
            b = chain[-2]
        if len(chain) > 1 and b == chain[-2]:
            chain.pop()
            chain.pop()
            lo, hi = min(a, b), max(a, b)
            height = float(D[lo, hi])
            _merge_rows(D, lo, hi, sizes, linkage)
            active[hi] = False
            merges.append((lo, hi, height))
        else:
            chain.append(b)
    return merges


def cut_merges(merges: list[tuple[int, int, float]], n: int, k: int, by_height: bool) -> np.ndarray:
    """Apply the first n - k merges (optionally in height order) and label components by first row"""
    order = sorted(range(len(merges)), key=lambda m: merges[m][2]) if by_height else range(len(merges))
    parent = np.arange(n)

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for count, m in enumerate(order):
        if count >= n - k:
            break
        a, b, _ = merges[m]
        ra, rb = find(a), find(b)
        parent[max(ra, rb)] = min(ra, rb)

    roots = np.array([find(i) for i in range(n)])
    _, labels = np.unique(roots, return_inverse=True)
    return labels.astype(np.int64)


def agglomerate(
    points: np.ndarray,
    k: int = 2,
    linkage: str = "ward",
    sizes: np.ndarray | None = None,
    exact_limit: int = 256,
    dense_limit: int = 5000,
) -> tuple[np.ndarray, list[tuple[int, int, float]]]:
    """Labels and merge history; exact greedy for small inputs, NN-chain above that"""
    n = len(points)
    sizes = np.ones(n) if sizes is None else np.asarray(sizes, dtype=np.float64)
    if n <= exact_limit:
        merges = _greedy_merges(points, sizes, linkage, n - 1)
        return cut_merges(merges, n, k, by_height=False), merges
    if linkage == "ward":
        merges = _ward_nn_chain(points, sizes)
    elif n <= dense_limit:
        if not np.all(sizes == 1):
            raise ConfigError("weighted agglomeration is only supported for ward linkage")
        merges = _dense_nn_chain(points, linkage)
    else:
        raise ConfigError(
            f"{linkage} linkage needs a dense {n}x{n} matrix; use ward or at most {dense_limit} points"
        )
    return cut_merges(merges, n, k, by_height=True), merges


def hierarchical(
    points: np.ndarray,
    k: int = 2,
    linkage: str = "ward",
    ids: np.ndarray | None = None,
    exact_limit: int = 256,
    dense_limit: int = 5000,
) -> ClusterResult:
    """Agglomerative clustering down to k clusters"""
    points = _as_points(points)
    n = len(points)
    if n < 2:
        raise ValueError(f"hierarchical clustering needs at least 2 points, got {n}")
    if linkage not in LINKAGES:
        raise ValueError(f"linkage must be one of {LINKAGES}, got {linkage}")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    labels, merges = agglomerate(points, k, linkage, None, exact_limit, dense_limit)
    return ClusterResult(
        labels=labels, ids=_row_ids(ids, n), method="hierarchical",
        merges=merges, degenerate=len(np.unique(labels)) < min(k, 2),
        params={"k": k, "linkage": linkage},
    )


# ---------------------------------------------------------------- BIRCH

class CFEntry:
    """Clustering feature (N, LS, SS) with an optional child node"""

    __slots__ = ("n", "ls", "ss", "child")

    def __init__(self, n: int, ls: np.ndarray, ss: float, child: CFNode | None = None):
        self.n = n
        self.ls = ls
        self.ss = ss
        self.child = child

    @classmethod
    def of_point(cls, x: np.ndarray) -> CFEntry:
        return cls(1, x.astype(np.float64).copy(), float(x @ x))

    @property
    def centroid(self) -> np.ndarray:
        return self.ls / self.n

    def radius(self) -> float:
        c = self.centroid
        return float(np.sqrt(max(self.ss / self.n - c @ c, 0.0)))

    def merged(self, other: CFEntry) -> CFEntry:
        return CFEntry(self.n + other.n, self.ls + other.ls, self.ss + other.ss)

    def absorb(self, other: CFEntry) -> None:
        self.n += other.n
        self.ls = self.ls + other.ls
        self.ss += other.ss


class CFNode:
    def __init__(self, is_leaf: bool, threshold: float, branching: int):
        self.is_leaf = is_leaf
        self.threshold = threshold
        self.branching = branching
        self.entries: list[CFEntry] = []

    def summary(self) -> CFEntry:
        total = CFEntry(0, np.zeros_like(self.entries[0].ls), 0.0)
        for entry in self.entries:
            total.absorb(entry)
        return total

    def closest(self, point: np.ndarray) -> int:
        centroids = np.array([e.centroid for e in self.entries])
        return int(((centroids - point) ** 2).sum(axis=1).argmin())

    def split(self) -> tuple[CFNode, CFNode]:
        """Seed two nodes with the farthest pair of entries; others go to the nearer seed"""
        centroids = np.array([e.centroid for e in self.entries])
        d2 = _sq_dist(centroids, centroids)
        a, b = divmod(int(d2.argmax()), len(centroids))
        if a == b:
            a, b = 0, len(centroids) - 1
        left = CFNode(self.is_leaf, self.threshold, self.branching)
        right = CFNode(self.is_leaf, self.threshold, self.branching)
        for idx, entry in enumerate(self.entries):
            (left if idx == a or (idx != b and d2[idx, a] <= d2[idx, b]) else right).entries.append(entry)
        return left, right


@dataclass
class CFTree:
    root: CFNode
    assignments: list[CFEntry]

    def leaf_entries(self) -> list[CFEntry]:
        out: list[CFEntry] = []
        stack = [self.root]
        while stack:
            node = stack.pop(0)
            if node.is_leaf:
                out.extend(node.entries)
            else:
                stack.extend(e.child for e in node.entries if e.child is not None)
        return out


def _insert(node: CFNode, point: np.ndarray, cf: CFEntry) -> tuple[CFEntry, tuple[CFNode, CFNode] | None]:
    """Insert one point below node; returns its leaf subcluster and the split pair if node overflowed"""
    if node.is_leaf:
        target: CFEntry | None = None
        if node.entries:
            candidate = node.entries[node.closest(point)]
            if candidate.merged(cf).radius() <= node.threshold:
                candidate.absorb(cf)
                target = candidate
        if target is None:
            target = CFEntry(cf.n, cf.ls.copy(), cf.ss)
            node.entries.append(target)
    else:
        idx = node.closest(point)
        parent = node.entries[idx]
        target, split = _insert(parent.child, point, cf)  # type: ignore[arg-type]
        if split is None:
            parent.absorb(cf)
        else:
            left, right = split
            node.entries[idx:idx + 1] = [_summarise(left), _summarise(right)]

    if len(node.entries) > node.branching:
        return target, node.split()
    return target, None


def _summarise(node: CFNode) -> CFEntry:
    total = node.summary()
    total.child = node
    return total


def build_cf_tree(points: np.ndarray, threshold: float = 0.5, branching: int = 50) -> CFTree:
    """Single pass of CF-tree insertions in row order"""
    if threshold <= 0:
        raise ValueError(f"BIRCH threshold must be > 0, got {threshold}")
    if branching < 2:
        raise ValueError(f"BIRCH branching must be >= 2, got {branching}")
    points = _as_points(points)
    root = CFNode(True, threshold, branching)
    assignments: list[CFEntry] = []
    for x in points:
        target, split = _insert(root, x, CFEntry.of_point(x))
        if split is not None:
            root = CFNode(False, threshold, branching)
            root.entries = [_summarise(split[0]), _summarise(split[1])]
        assignments.append(target)
    return CFTree(root, assignments)


def check_additivity(node: CFNode, atol: float = 1e-8) -> bool:
    """Every internal entry's CF equals the sum of its child's entries"""
    for entry in node.entries:
        if entry.child is None:
            continue
        total = entry.child.summary()
        if total.n != entry.n or abs(total.ss - entry.ss) > atol * max(1.0, abs(entry.ss)):
            return False
        if not np.allclose(total.ls, entry.ls, atol=atol):
            return False
        if not check_additivity(entry.child, atol):
            return False
    return True


def birch(
    points: np.ndarray,
    threshold: float = 0.5,
    branching: int = 50,
    k: int = 2,
    ids: np.ndarray | None = None,
    exact_limit: int = 256,
) -> ClusterResult:
    """CF-tree subclusters, then size-weighted Ward over subcluster centroids"""
    points = _as_points(points)
    tree = build_cf_tree(points, threshold, branching)
    leaves = tree.leaf_entries()
    index = {id(entry): i for i, entry in enumerate(leaves)}
    sub_labels = np.array([index[id(entry)] for entry in tree.assignments], dtype=np.int64)
    logger.debug("BIRCH built %d leaf subclusters from %d points", len(leaves), len(points))

    if len(leaves) < k:
        labels = np.zeros(len(points), dtype=np.int64)
        degenerate = True
        merges: list[tuple[int, int, float]] = []
    else:
        centroids = np.array([e.centroid for e in leaves])
        sizes = np.array([e.n for e in leaves], dtype=np.float64)
        leaf_labels, merges = agglomerate(centroids, k, "ward", sizes, exact_limit)
        labels = leaf_labels[sub_labels]
        degenerate = len(np.unique(labels)) < k

    return ClusterResult(
        labels=labels, ids=_row_ids(ids, len(points)), method="birch",
        degenerate=degenerate, merges=merges,
        params={"k": k, "threshold": threshold, "branching": branching, "n_subclusters": len(leaves)},
    )


# ---------------------------------------------------------------- proxy labels

def standardize(h: np.ndarray) -> np.ndarray:
    """Per-dimension z-score; constant dimensions are centred only"""
    h = np.asarray(h, dtype=np.float64)
    std = h.std(axis=0)
    return (h - h.mean(axis=0)) / np.where(std < 1e-12, 1.0, std)


def effective_threshold(config: ClusteringConfig, dim: int) -> float:
    """BIRCH radius for `dim`-dimensional points; scaled by sqrt(dim) when `scale_threshold` is set"""
    return float(config.threshold * np.sqrt(dim)) if config.scale_threshold else config.threshold


def cluster_embeddings(
    h: np.ndarray,
    method: str,
    config: ClusteringConfig,
    seed: int = 0,
    ids: np.ndarray | None = None,
) -> ClusterResult:
    if method not in METHODS:
        raise ConfigError(f"unknown clustering method '{method}'; choose from {METHODS}")
    points = standardize(h) if config.standardize else _as_points(h)
    logger.info("Clustering %d embeddings with %s", len(points), method)
    if method == "kmeans":
        return kmeans(points, 2, config.restarts, seed, config.max_iter, ids)
    if method == "hierarchical":
        return hierarchical(points, 2, config.linkage, ids, config.exact_limit, config.dense_limit)
    result = birch(points, effective_threshold(config, points.shape[1]), config.branching, 2, ids, config.exact_limit)
    result.seed = seed
    return result


def assign_proxy(result: ClusterResult) -> ProxyLabels:
    """Orient clusters so the larger one is group 0 (ties: the cluster of the first row)"""
    values, counts = np.unique(result.labels, return_counts=True)
    if result.degenerate or len(values) != 2:
        raise DegenerateClusterError(
            f"{result.method} produced {len(values)} non-empty cluster(s); "
            "try a different clustering method or seed"
        )
    first = result.labels[0]
    if counts[0] != counts[1]:
        major = values[int(counts.argmax())]
    else:
        major = first
    proxy = (result.labels != major).astype(np.int64)
    n0 = int((proxy == 0).sum())
    return ProxyLabels(result.ids.copy(), proxy, (n0, len(proxy) - n0), result.method)


def agreement(proxy: np.ndarray, s: np.ndarray) -> dict[str, float]:
    """Balanced accuracy of proxy vs true sensitive labels under the better polarity"""
    proxy, s = np.asarray(proxy), np.asarray(s)
    if proxy.shape != s.shape:
        raise ShapeError(f"{len(proxy)} proxy labels for {len(s)} sensitive labels")

    def balanced(p: np.ndarray) -> float:
        rates = [float((p[s == g] == g).mean()) for g in (0, 1) if (s == g).any()]
        return float(np.mean(rates)) if rates else 0.0

    direct, flipped = balanced(proxy), balanced(1 - proxy)
    return {
        "balanced_accuracy": max(direct, flipped),
        "accuracy": float(max((proxy == s).mean(), (proxy != s).mean())),
        "flipped": float(flipped > direct),
    }
