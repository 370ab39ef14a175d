"""Exact k-d tree for descriptor retrieval: an accelerator, never an approximator.

Median split on the max-spread dimension, leaf size 16. Results are guaranteed to
match a linear scan, with ties on distance broken by lower point index.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

LEAF_SIZE = 16


@dataclass
class _Leaf:
    indices: np.ndarray


@dataclass
class _Node:
    dim: int
    threshold: float
    left: Union["_Node", _Leaf]
    right: Union["_Node", _Leaf]


class KDTree:
    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("KDTree needs a non-empty (N, D) array")
        self.points = pts
        self.root = self._build(np.arange(len(pts), dtype=np.int64))

    def _build(self, idx: np.ndarray) -> Union[_Node, _Leaf]:
        if len(idx) <= LEAF_SIZE:
            return _Leaf(idx)
        sub = self.points[idx]
        spread = sub.max(axis=0) - sub.min(axis=0)
        dim = int(np.argmax(spread))
        if spread[dim] <= 0.0:  # all points identical: no split possible
            return _Leaf(idx)
        order = np.argsort(sub[:, dim], kind="stable")
        mid = len(idx) // 2
        threshold = float(sub[order[mid], dim])
        left, right = idx[order[:mid]], idx[order[mid:]]
        if len(left) == 0 or len(right) == 0:  # degenerate split under duplicate values
            return _Leaf(idx)
        return _Node(dim, threshold, self._build(left), self._build(right))

    def query(self, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """k nearest points: (indices, distances), ascending distance, ties to lower index."""
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.points.shape[1]:
            raise ValueError(
                f"query dim {q.shape[0]} does not match tree dim {self.points.shape[1]}"
            )
        k = min(k, len(self.points))
        # max-heap on (dist2, index): heapq pops the largest via negation
        heap: list[tuple[float, int]] = []

        def worst() -> tuple[float, int]:
            if len(heap) < k:
                return (np.inf, -1)
            d2, i = heap[0]
            return (-d2, -i)

        def visit(node) -> None:
            if isinstance(node, _Leaf):
                d2 = np.sum((self.points[node.indices] - q) ** 2, axis=1)
                for dist2, i in zip(d2, node.indices):
                    cand = (float(dist2), int(i))
                    if cand < worst():
                        heapq.heappush(heap, (-cand[0], -cand[1]))
                        if len(heap) > k:
                            heapq.heappop(heap)
                return
            delta = q[node.dim] - node.threshold
            near, far = (node.right, node.left) if delta >= 0 else (node.left, node.right)
            visit(near)
            if delta * delta <= worst()[0]:
                visit(far)

        visit(self.root)
        out = sorted((-d2, -i) for d2, i in heap)
        idx = np.array([i for _, i in out], dtype=np.int64)
        dist = np.sqrt(np.array([d2 for d2, _ in out]))
        return idx, dist

    def query_many(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Batched query: (M, k') indices and distances with k' = min(k, N)."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, self.points.shape[1])
        kk = min(k, len(self.points))
        idx = np.empty((len(queries), kk), dtype=np.int64)
        dist = np.empty((len(queries), kk))
        for m, q in enumerate(queries):
            idx[m], dist[m] = self.query(q, k)
        return idx, dist


def linear_knn(points: np.ndarray, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force reference with the same ordering contract as KDTree.query."""
    pts = np.asarray(points, dtype=np.float64)
    d2 = np.sum((pts - np.asarray(q, dtype=np.float64)) ** 2, axis=1)
    order = np.lexsort((np.arange(len(pts)), d2))[: min(k, len(pts))]
    return order.astype(np.int64), np.sqrt(d2[order])
