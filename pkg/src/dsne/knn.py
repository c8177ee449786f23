"""Exact K-nearest-neighbor search via a vantage-point tree.

The tree partitions points by distance to a randomly chosen vantage point
(median split) and prunes subtrees with the triangle inequality during
queries. Results are exact under the Euclidean metric; ties in distance are
broken by ascending point index so that repeated runs produce bit-identical
neighbor tables.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

# Subtrees at or below this size are kept as flat leaves and scanned directly.
_LEAF_SIZE = 24


@dataclass
class NeighborTable:
    """Neighbor indices per point, row-sorted by (distance, index).

    B[i] never contains i; entries are distinct indices in [0, N).
    """

    B: np.ndarray  # (N, K) int
    N: int
    K: int


class _Node:
    __slots__ = ("vantage", "radius", "inside", "outside", "leaf")

    def __init__(self):
        self.vantage = -1
        self.radius = 0.0
        self.inside = None
        self.outside = None
        self.leaf = None  # list of indices for bucket nodes


class VpTree:
    """Vantage-point tree over a fixed point set."""

    def __init__(self, points: np.ndarray, seed: int = 0):
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[0] < 2:
            raise ValueError("need at least 2 points of dimension >= 1")
        self.points = points
        self.n = points.shape[0]
        # Tuples make math.dist the cheapest exact distance evaluation here.
        self._tuples = [tuple(row) for row in points]
        rng = np.random.default_rng(seed)
        self.root = self._build(list(range(self.n)), rng)

    def _build(self, indices: list[int], rng) -> _Node:
        node = _Node()
        if len(indices) <= _LEAF_SIZE:
            node.leaf = indices
            return node
        pick = int(rng.integers(len(indices)))
        vantage = indices.pop(pick)
        node.vantage = vantage
        vt = self._tuples[vantage]
        dists = [math.dist(vt, self._tuples[j]) for j in indices]
        order = sorted(range(len(indices)), key=lambda t: (dists[t], indices[t]))
        mid = len(indices) // 2
        node.radius = dists[order[mid]]
        inside = [indices[t] for t in order[:mid]]
        outside = [indices[t] for t in order[mid:]]
        if inside:
            node.inside = self._build(inside, rng)
        if outside:
            node.outside = self._build(outside, rng)
        return node

    def query(self, point, k: int, exclude: int = -1) -> list[tuple[float, int]]:
        """k nearest (distance, index) pairs to ``point``, exact with
        (distance, index) tie-break; ``exclude`` is omitted from results."""
        q = tuple(np.asarray(point, dtype=float))
        # Max-heap of the current best k as (-dist, -idx); top is the worst.
        heap: list[tuple[float, float]] = []

        def consider(idx: int):
            if idx == exclude:
                return
            d = math.dist(q, self._tuples[idx])
            if len(heap) < k:
                heapq.heappush(heap, (-d, -idx))
            elif (d, idx) < (-heap[0][0], -heap[0][1]):
                heapq.heapreplace(heap, (-d, -idx))

        def tau() -> float:
            return math.inf if len(heap) < k else -heap[0][0]

        def search(node: _Node):
            if node is None:
                return
            if node.leaf is not None:
                for idx in node.leaf:
                    consider(idx)
                return
            d = math.dist(q, self._tuples[node.vantage])
            consider(node.vantage)
            if d < node.radius:
                search(node.inside)
                # Boundary equality kept: an outside point at exactly tau may
                # still win its tie on index.
                if d + tau() >= node.radius:
                    search(node.outside)
            else:
                search(node.outside)
                if d - tau() <= node.radius:
                    search(node.inside)

        search(self.root)
        return sorted((-d, -i) for d, i in heap)


def build_vptree(points: np.ndarray, seed: int = 0) -> VpTree:
    """Build a queryable exact-KNN tree (N >= 2 required)."""
    return VpTree(points, seed=seed)


def knn_all(tree: VpTree, K: int) -> NeighborTable:
    """Neighbor table of the K nearest neighbors of every indexed point.

    Each row excludes the point itself and is sorted by ascending distance,
    ties by ascending index. Requires 1 <= K <= N - 1.
    """
    n = tree.n
    if not 1 <= K <= n - 1:
        raise ValueError(f"K must be in [1, {n - 1}], got {K}")
    table = np.empty((n, K), dtype=np.int64)
    for i in range(n):
        hits = tree.query(tree.points[i], K, exclude=i)
        table[i] = [idx for _, idx in hits]
    return NeighborTable(B=table, N=n, K=K)
