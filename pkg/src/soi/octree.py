"""Octree over 3D points with exact kNN and radius queries.

The tree partitions space into axis-aligned cubes; leaves hold point index
arrays so per-leaf work stays vectorized. Queries are exact: results match a
brute-force scan, with distance ties broken by the lower point index.
"""

import heapq

import numpy as np

__all__ = ["Octree", "knn_brute", "knn_bulk"]


class _Node:
    __slots__ = ("center", "half", "children", "indices")

    def __init__(self, center, half, indices):
        self.center = center
        self.half = half
        self.children = None  # list of 8 (or fewer) _Node once split
        self.indices = indices  # leaf payload; None for internal nodes


class Octree:
    """Static octree over an (N, 3) float array.

    Duplicate points are allowed. `leaf_capacity` bounds the number of points
    scanned per leaf; subdivision stops early for coincident clusters.
    """

    def __init__(self, points, leaf_capacity=16):
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {points.shape}")
        if leaf_capacity < 1:
            raise ValueError("leaf_capacity must be >= 1")
        self.points = points
        self.leaf_capacity = int(leaf_capacity)
        n = len(points)
        if n == 0:
            self.root = None
            return
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        center = 0.5 * (lo + hi)
        half = float(max((hi - lo).max() * 0.5, 1e-12)) * (1.0 + 1e-9)
        self.root = self._build(center, half, np.arange(n))

    def _build(self, center, half, indices):
        node = _Node(center, half, indices)
        if len(indices) <= self.leaf_capacity or half < 1e-12:
            return node
        pts = self.points[indices]
        # all-coincident guard: splitting would recurse forever
        if np.ptp(pts, axis=0).max() == 0.0:
            return node
        octant = ((pts >= center) * np.array([1, 2, 4])).sum(axis=1)
        node.indices = None
        node.children = []
        for o in range(8):
            sub = indices[octant == o]
            if len(sub) == 0:
                continue
            off = np.array([(o >> a) & 1 for a in range(3)], dtype=float) - 0.5
            node.children.append(self._build(center + off * half, half * 0.5, sub))
        return node

    def _min_dist(self, node, q):
        d = np.abs(q - node.center) - node.half
        np.maximum(d, 0.0, out=d)
        return float(np.sqrt((d * d).sum()))

    def knn(self, query, k):
        """Indices of the k nearest points, ordered by (distance, index)."""
        q = np.asarray(query, dtype=float).reshape(3)
        n = len(self.points)
        if k < 1 or k > n:
            raise ValueError(f"k={k} out of range for {n} points")
        # best: max-heap on (dist, idx) via negation; top is the current worst
        best = []
        counter = 0
        todo = [(0.0, counter, self.root)]
        while todo:
            ndist, _, node = heapq.heappop(todo)
            if len(best) == k and (-best[0][0], -best[0][1]) < (ndist, 0):
                break  # nearest unvisited node cannot beat the worst kept
            if node.children is not None:
                for ch in node.children:
                    counter += 1
                    heapq.heappush(todo, (self._min_dist(ch, q), counter, ch))
                continue
            idx = node.indices
            d = np.sqrt(((self.points[idx] - q) ** 2).sum(axis=1))
            for di, ii in zip(d, idx):
                cand = (float(di), int(ii))
                if len(best) < k:
                    heapq.heappush(best, (-cand[0], -cand[1]))
                elif cand < (-best[0][0], -best[0][1]):
                    heapq.heapreplace(best, (-cand[0], -cand[1]))
        out = sorted((-d, -i) for d, i in best)
        return np.array([i for _, i in out], dtype=int)

    def radius_neighbors(self, query, r):
        """Sorted indices of all points within distance r (inclusive)."""
        if r <= 0:
            raise ValueError("r must be > 0")
        q = np.asarray(query, dtype=float).reshape(3)
        found = []
        stack = [self.root] if self.root is not None else []
        while stack:
            node = stack.pop()
            if self._min_dist(node, q) > r:
                continue
            if node.children is not None:
                stack.extend(node.children)
                continue
            idx = node.indices
            d2 = ((self.points[idx] - q) ** 2).sum(axis=1)
            found.append(idx[d2 <= r * r])
        if not found:
            return np.empty(0, dtype=int)
        return np.sort(np.concatenate(found))


def knn_brute(points, query, k):
    """O(N) reference scan with the same (distance, index) tie rule."""
    points = np.asarray(points, dtype=float)
    q = np.asarray(query, dtype=float).reshape(3)
    d = np.sqrt(((points - q) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(len(points)), d))
    return order[:k]


def knn_bulk(points, k, exclude_self=True, block=512):
    """kNN for every point against the whole cloud, blocked for memory.

    Returns (indices (N, k), distances (N, k)) ordered by (distance, index).
    With exclude_self=True the point itself (by index) is skipped; coincident
    duplicates at other indices still count as neighbors.
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    kk = k + 1 if exclude_self else k
    if kk > n:
        raise ValueError(f"k={k} too large for {n} points")
    idx_out = np.empty((n, k), dtype=int)
    dist_out = np.empty((n, k))
    for s in range(0, n, block):
        e = min(s + block, n)
        d = np.sqrt(((points[s:e, None, :] - points[None, :, :]) ** 2).sum(axis=2))
        if exclude_self:
            d[np.arange(e - s), np.arange(s, e)] = np.inf
        # lexsort per row: distance primary, index secondary
        col = np.broadcast_to(np.arange(n), d.shape)
        order = np.lexsort((col, d), axis=1)[:, :k]
        idx_out[s:e] = order
        dist_out[s:e] = np.take_along_axis(d, order, axis=1)
    return idx_out, dist_out
