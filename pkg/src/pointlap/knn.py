"""Symmetrized K-nearest-neighbor graphs and voxel coarsening.

Neighbor queries run on a bucketed k-d tree (exhaustive scan below 64
points). Distance ties are broken by ascending point index so graphs are
bit-reproducible. The voxel grid is anchored at the cloud's bounding-box
minimum, which keeps coarsening covariant under translation.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud

_LEAF_SIZE = 24


class _Node:
    __slots__ = ("axis", "threshold", "left", "right", "idx")

    def __init__(self, axis=-1, threshold=0.0, left=None, right=None, idx=None):
        self.axis = axis
        self.threshold = threshold
        self.left = left
        self.right = right
        self.idx = idx


class KdTree:
    """Exact k-nearest-neighbor queries with (distance, index) ordering."""

    def __init__(self, points: np.ndarray):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        self.root = self._build(np.arange(len(self.points), dtype=np.int64))

    def _build(self, idx: np.ndarray) -> _Node:
        if idx.size <= _LEAF_SIZE:
            return _Node(idx=np.sort(idx))
        pts = self.points[idx]
        spans = pts.max(axis=0) - pts.min(axis=0)
        axis = int(np.argmax(spans))
        order = np.argsort(pts[:, axis], kind="stable")
        half = idx.size // 2
        left, right = idx[order[:half]], idx[order[half:]]
        threshold = float(pts[order[half], axis])
        return _Node(axis, threshold, self._build(left), self._build(right))

    def query(self, q: np.ndarray, k: int, exclude: int = -1) -> np.ndarray:
        """Indices of the k nearest points to q, ties broken by smaller index."""
        # heap holds (-d2, -idx): the root is the current worst candidate
        heap: list[tuple[float, int]] = []

        def consider(ids):
            d2 = np.sum((self.points[ids] - q) ** 2, axis=1)
            for j in range(len(ids)):
                i = int(ids[j])
                if i == exclude:
                    continue
                cand = (-float(d2[j]), -i)
                if len(heap) < k:
                    heapq.heappush(heap, cand)
                elif cand > heap[0]:
                    heapq.heapreplace(heap, cand)

        def visit(node: _Node):
            if node.idx is not None:
                consider(node.idx)
                return
            delta = q[node.axis] - node.threshold
            near, far = (node.right, node.left) if delta >= 0 else (node.left, node.right)
            visit(near)
            if len(heap) < k or delta * delta <= -heap[0][0]:
                visit(far)

        visit(self.root)
        out = sorted(((-d2, -i) for d2, i in heap))
        return np.array([i for _, i in out], dtype=np.int64)


def brute_force_neighbors(points: np.ndarray, k: int) -> np.ndarray:
    """All-pairs scan; same (distance, index) ordering as the tree."""
    n = len(points)
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    out = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n)
    for i in range(n):
        order = np.lexsort((idx, d2[i]))
        out[i] = order[:k]
    return out


@dataclass
class KnnGraph:
    """Symmetric directed edge list without explicit self-loops.

    Self-loops exist implicitly on every vertex (they carry the Laplacian
    diagonal and enter the sparsity count, but never message passing).
    """

    positions: np.ndarray        # (n, 3)
    edge_src: np.ndarray         # (e,) int64, sorted lexicographically with edge_dst
    edge_dst: np.ndarray
    degree: np.ndarray           # (n,) neighbor count, self-loop excluded
    k: int = 0

    @property
    def num_vertices(self) -> int:
        return len(self.positions)

    @property
    def num_edges(self) -> int:
        return len(self.edge_src)

    def undirected_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """(i, j) arrays with i < j, one entry per undirected edge, sorted."""
        keep = self.edge_src < self.edge_dst
        return self.edge_src[keep], self.edge_dst[keep]

    def mean_nnz_per_row(self) -> float:
        """Mean nonzeros per Laplacian row: degree + the implicit self-loop."""
        return float(self.degree.mean() + 1.0)

    def save_edge_list(self, path) -> None:
        with open(path, "w", encoding="ascii") as f:
            for i, j in zip(self.edge_src, self.edge_dst):
                f.write(f"{i} {j}\n")


def build_knn(points, k: int = 8) -> KnnGraph:
    """Symmetrized KNN graph; requires at least k + 1 points."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    pts = pts.reshape(-1, 3)
    n = len(pts)
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} points for k={k}, got {n}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite coordinates")
    if n < 64:
        nbrs = brute_force_neighbors(pts, k)
    else:
        tree = KdTree(pts)
        nbrs = np.empty((n, k), dtype=np.int64)
        for i in range(n):
            nbrs[i] = tree.query(pts[i], k, exclude=i)
    src = np.repeat(np.arange(n, dtype=np.int64), k)
    dst = nbrs.ravel()
    pairs = np.unique(np.r_[np.stack([src, dst], axis=1), np.stack([dst, src], axis=1)], axis=0)
    edge_src, edge_dst = pairs[:, 0], pairs[:, 1]
    degree = np.bincount(edge_src, minlength=n).astype(np.int64)
    return KnnGraph(pts, edge_src, edge_dst, degree, k=k)


def graph_from_edges(positions: np.ndarray, src, dst, k: int = 0) -> KnnGraph:
    """Graph from an arbitrary directed edge list; symmetrized and deduplicated."""
    n = len(positions)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    pairs = np.unique(np.r_[np.stack([src, dst], axis=1), np.stack([dst, src], axis=1)], axis=0) \
        if src.size else np.zeros((0, 2), dtype=np.int64)
    edge_src = pairs[:, 0] if pairs.size else np.zeros(0, dtype=np.int64)
    edge_dst = pairs[:, 1] if pairs.size else np.zeros(0, dtype=np.int64)
    degree = np.bincount(edge_src, minlength=n).astype(np.int64)
    return KnnGraph(np.asarray(positions, dtype=np.float64), edge_src, edge_dst, degree, k=k)


@dataclass
class CoarseningLevel:
    parent: KnnGraph = field(repr=False)
    mapping: np.ndarray          # fine vertex -> coarse vertex
    coarse: KnnGraph
    voxel_size: float
    counts: np.ndarray           # fine vertices per coarse vertex

    @property
    def num_coarse(self) -> int:
        return self.coarse.num_vertices


def coarsen_by_voxel(graph: KnnGraph, voxel_size: float,
                     anchor: np.ndarray | None = None) -> CoarseningLevel:
    """Merge vertices sharing a voxel; coarse edges are images of fine edges.

    The grid is anchored at the bounding-box minimum (or the caller-supplied
    anchor) so translating the cloud translates the voxel assignment with it.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    pos = graph.positions
    if anchor is None:
        anchor = pos.min(axis=0)
    keys = np.floor((pos - anchor) / voxel_size).astype(np.int64)
    uniq, mapping = np.unique(keys, axis=0, return_inverse=True)
    mapping = mapping.astype(np.int64)
    nc = len(uniq)
    counts = np.bincount(mapping, minlength=nc).astype(np.int64)
    centroids = np.zeros((nc, 3))
    for a in range(3):
        centroids[:, a] = np.bincount(mapping, weights=pos[:, a], minlength=nc)
    centroids /= counts[:, None]
    coarse = graph_from_edges(centroids, mapping[graph.edge_src], mapping[graph.edge_dst], k=graph.k)
    return CoarseningLevel(graph, mapping, coarse, float(voxel_size), counts)


def pool_features(level: CoarseningLevel, fine_features: np.ndarray) -> np.ndarray:
    """Per-voxel mean of fine features."""
    x = np.asarray(fine_features, dtype=np.float64)
    if x.shape[0] != level.parent.num_vertices:
        raise ValueError("feature rows must match fine vertex count")
    flat = x.reshape(len(x), -1)
    out = np.zeros((level.num_coarse, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(level.mapping, weights=flat[:, c], minlength=level.num_coarse)
    out /= level.counts[:, None]
    return out.reshape((level.num_coarse,) + x.shape[1:])


def unpool_features(level: CoarseningLevel, coarse_features: np.ndarray) -> np.ndarray:
    """Copy each coarse feature back to its fine vertices."""
    x = np.asarray(coarse_features, dtype=np.float64)
    if x.shape[0] != level.num_coarse:
        raise ValueError("feature rows must match coarse vertex count")
    return x[level.mapping]
