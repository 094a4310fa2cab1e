"""Exact k-nearest-neighbor search over descriptor vectors.

Balanced kd-tree: median split on cycling axes, small leaf buckets.
Results are exactly those of an exhaustive scan ordered by
(distance, index), so ties resolve deterministically by insertion index.
"""

import heapq

import numpy as np

LEAF_SIZE = 16


class KDTree:
    def __init__(self, points):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if self.points.ndim != 2 or len(self.points) == 0:
            raise ValueError("points must be a non-empty (N, dim) array")
        self.dim = self.points.shape[1]
        # node storage: axis, split value, children; leaves hold index slices
        self._axis = []
        self._value = []
        self._left = []
        self._right = []
        self._leaf_start = []
        self._leaf_end = []
        self._order = np.arange(len(self.points))
        self._root = self._build(0, len(self.points), 0)

    def _new_node(self):
        for arr in (self._axis, self._value, self._left, self._right,
                    self._leaf_start, self._leaf_end):
            arr.append(-1)
        return len(self._axis) - 1

    def _build(self, lo, hi, depth):
        node = self._new_node()
        count = hi - lo
        if count <= LEAF_SIZE:
            self._leaf_start[node] = lo
            self._leaf_end[node] = hi
            return node
        axis = depth % self.dim
        seg = self._order[lo:hi]
        mid = count // 2
        part = np.argpartition(self.points[seg, axis], mid)
        self._order[lo:hi] = seg[part]
        self._axis[node] = axis
        self._value[node] = float(self.points[self._order[lo + mid], axis])
        self._left[node] = self._build(lo, lo + mid, depth + 1)
        self._right[node] = self._build(lo + mid, hi, depth + 1)
        return node

    def query(self, q, k):
        """k nearest points: (indices, distances) sorted by (distance, index)."""
        q = np.asarray(q, dtype=np.float64)
        n = len(self.points)
        k = min(int(k), n)
        if k < 1:
            raise ValueError("k must be >= 1")
        if k >= n:  # exhaustive scan is both exact and fastest here
            d2 = np.sum((self.points - q) ** 2, axis=1)
            order = np.lexsort((np.arange(n), d2))[:k]
            return order, np.sqrt(d2[order])

        heap = []  # entries (-d2, -index): root is the worst kept candidate

        def worst():
            return (-heap[0][0], -heap[0][1])

        def offer(d2, idx):
            if len(heap) < k:
                heapq.heappush(heap, (-d2, -idx))
            elif (d2, idx) < worst():
                heapq.heapreplace(heap, (-d2, -idx))

        stack = [(self._root, 0.0)]
        while stack:
            node, bound = stack.pop()
            if len(heap) == k and bound > worst()[0]:
                continue
            if self._leaf_start[node] >= 0:
                idx = self._order[self._leaf_start[node]:self._leaf_end[node]]
                d2s = np.sum((self.points[idx] - q) ** 2, axis=1)
                for d2, i in zip(d2s, idx):
                    offer(float(d2), int(i))
                continue
            axis = self._axis[node]
            delta = q[axis] - self._value[node]
            near, far = ((self._left[node], self._right[node]) if delta < 0
                         else (self._right[node], self._left[node]))
            stack.append((far, max(bound, delta * delta)))
            stack.append((near, bound))
        found = sorted((-neg_d2, -neg_i) for neg_d2, neg_i in heap)
        idx = np.asarray([i for _, i in found], dtype=np.int64)
        return idx, np.sqrt(np.asarray([d2 for d2, _ in found]))


def brute_force_query(points, q, k):
    """Reference exhaustive scan with the same (distance, index) ordering."""
    points = np.asarray(points, dtype=np.float64)
    d2 = np.sum((points - np.asarray(q)) ** 2, axis=1)
    order = np.lexsort((np.arange(len(points)), d2))[:min(k, len(points))]
    return order, np.sqrt(d2[order])
