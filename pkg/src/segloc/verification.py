"""Geometric consistency verification and 6-DOF pose recovery.

Candidate matches form a graph whose edges assert that two matches preserve pairwise
centroid distance; the maximum clique is the largest mutually consistent subset, and a
closed-form least-squares alignment of its centroid pairs yields the pose. ICP lives
here too, as the evaluation-side error probe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometry
from .geometry import SE3
from .mapdb import MatchCandidate


@dataclass
class VerificationConfig:
    epsilon: float = 0.4          # meters of pairwise-distance slack
    min_clique_size: int = 4
    clique_node_budget: int = 2_000_000

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class ConsistencyGraph:
    candidates: list[MatchCandidate]
    adjacency: np.ndarray  # (n, n) bool, symmetric, false diagonal
    epsilon: float


@dataclass
class PoseEstimate:
    T_map_query: SE3
    inliers: list[MatchCandidate] = field(default_factory=list)
    rms_residual: float = 0.0
    accepted: bool = False
    reason: str = ""

    @property
    def clique_size(self) -> int:
        return len(self.inliers)


def build_graph(candidates: list[MatchCandidate], epsilon: float) -> ConsistencyGraph:
    """Edge (i, j) iff the two matches use distinct segments on both sides and preserve
    the distance between their centroids within epsilon."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n = len(candidates)
    adj = np.zeros((n, n), dtype=bool)
    if n >= 2:
        q = np.stack([c.query_centroid for c in candidates])
        m = np.stack([c.map_centroid for c in candidates])
        dq = np.linalg.norm(q[:, None, :] - q[None, :, :], axis=2)
        dm = np.linalg.norm(m[:, None, :] - m[None, :, :], axis=2)
        adj = np.abs(dq - dm) <= epsilon
        qid = np.array([c.query_segment_id for c in candidates])
        mid = np.array([c.map_segment_id for c in candidates])
        adj &= qid[:, None] != qid[None, :]
        adj &= mid[:, None] != mid[None, :]
        np.fill_diagonal(adj, False)
    return ConsistencyGraph(candidates, adj, epsilon)


class CliqueBudgetExceeded(Exception):
    pass


class _CliqueSearch:
    """Exact branch-and-bound with a greedy-coloring bound, on bitset adjacency."""

    def __init__(self, adjacency: np.ndarray, node_budget: int):
        self.n = len(adjacency)
        self.adj = [int.from_bytes(np.packbits(adjacency[v], bitorder="little").tobytes(),
                                   "little") for v in range(self.n)]
        self.budget = node_budget
        self.nodes = 0

    def _tick(self):
        self.nodes += 1
        if self.nodes > self.budget:
            raise CliqueBudgetExceeded(f"clique search exceeded {self.budget} nodes")

    def _color_order(self, cand: int) -> list[tuple[int, int]]:
        """Greedy coloring of the candidate set; returns (vertex, color) in color order."""
        order = []
        color = 0
        rest = cand
        while rest:
            color += 1
            avail = rest
            while avail:
                v = (avail & -avail).bit_length() - 1
                order.append((v, color))
                avail &= ~(1 << v)
                avail &= ~self.adj[v]
                rest &= ~(1 << v)
        return order

    def max_size(self) -> int:
        best = 0

        def expand(size: int, cand: int):
            nonlocal best
            self._tick()
            order = self._color_order(cand)
            for v, color in reversed(order):
                if size + color <= best:
                    return
                nxt = cand & self.adj[v]
                if nxt:
                    expand(size + 1, nxt)
                else:
                    best = max(best, size + 1)
                cand &= ~(1 << v)

        if self.n:
            expand(0, (1 << self.n) - 1)
        return best

    def has_clique(self, cand: int, need: int) -> bool:
        """Decision variant: does `cand` contain a clique of size `need`?"""
        if need <= 0:
            return True

        def expand(size: int, cand: int) -> bool:
            self._tick()
            order = self._color_order(cand)
            for v, color in reversed(order):
                if size + color < need:
                    return False
                nxt = cand & self.adj[v]
                if size + 1 >= need:
                    return True
                if nxt and expand(size + 1, nxt):
                    return True
                cand &= ~(1 << v)
            return False

        return expand(0, cand)


def max_clique(adjacency: np.ndarray, node_budget: int = 2_000_000) -> list[int]:
    """A maximum clique; among equal-size maxima, the lexicographically smallest id set.

    Exact search. Raises CliqueBudgetExceeded on pathological instances.
    """
    n = len(adjacency)
    if n == 0:
        return []
    search = _CliqueSearch(adjacency, node_budget)
    target = search.max_size()
    if target == 0:
        return []
    chosen: list[int] = []
    cand = (1 << n) - 1
    while len(chosen) < target:
        v = 0
        while True:
            if (cand >> v) & 1 and search.has_clique(cand & search.adj[v],
                                                     target - len(chosen) - 1):
                break
            v += 1
        chosen.append(v)
        cand &= search.adj[v]
    return chosen


DEGENERACY_TOL = 1e-9


def align_centroids(query_pts: np.ndarray, map_pts: np.ndarray) -> tuple[SE3, float]:
    """Closed-form rigid alignment minimizing sum ||T q_i - m_i||^2; returns (T, rms).

    Cross-covariance SVD with determinant sign correction. Raises DegenerateGeometry
    for under-constrained (< 3 pairs or collinear) input.
    """
    q = np.asarray(query_pts, dtype=np.float64).reshape(-1, 3)
    m = np.asarray(map_pts, dtype=np.float64).reshape(-1, 3)
    if len(q) != len(m):
        raise ValueError("point lists must pair up")
    if len(q) < 3:
        raise DegenerateGeometry(f"need >= 3 pairs, got {len(q)}")
    qc = q - q.mean(axis=0)
    mc = m - m.mean(axis=0)
    cov_q = qc.T @ qc / len(q)
    if np.linalg.svd(cov_q, compute_uv=False)[1] <= DEGENERACY_TOL:
        raise DegenerateGeometry("collinear centroid configuration")
    H = qc.T @ mc
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = m.mean(axis=0) - R @ q.mean(axis=0)
    T = SE3(R, t)
    rms = float(np.sqrt(np.mean(np.sum((T.apply(q) - m) ** 2, axis=1))))
    return T, rms


def verify(candidates: list[MatchCandidate], cfg: VerificationConfig) -> PoseEstimate:
    """Graph, maximum clique, then pose from the clique's centroid pairs.

    Candidates are canonically ordered first, so the result is invariant to input order.
    Rejection (too-small clique, degenerate geometry, budget) is a value, not an error.
    """
    cands = sorted(candidates, key=lambda c: (c.query_segment_id, c.map_segment_id,
                                              c.descriptor_distance))
    if not cands:
        return PoseEstimate(SE3.identity(), reason="no candidates")
    graph = build_graph(cands, cfg.epsilon)
    try:
        clique = max_clique(graph.adjacency, cfg.clique_node_budget)
    except CliqueBudgetExceeded:
        return PoseEstimate(SE3.identity(), reason="clique-budget")
    if len(clique) < cfg.min_clique_size:
        return PoseEstimate(SE3.identity(),
                            inliers=[cands[i] for i in clique],
                            reason=f"clique size {len(clique)} < {cfg.min_clique_size}")
    inliers = [cands[i] for i in clique]
    q = np.stack([c.query_centroid for c in inliers])
    m = np.stack([c.map_centroid for c in inliers])
    try:
        T, rms = align_centroids(q, m)
    except DegenerateGeometry as e:
        return PoseEstimate(SE3.identity(), inliers=inliers, reason=f"degenerate: {e}")
    return PoseEstimate(T, inliers=inliers, rms_residual=rms, accepted=True)


@dataclass
class IcpConfig:
    max_iter: int = 30
    tol: float = 1e-4  # meters of per-iteration translation below which we stop


# Association gate: pairs farther apart than this never constrain the alignment,
# so query structure absent from the map (unmapped objects, different viewpoints)
# cannot drag the solution. Any value well above the expected residual behaves
# the same, hence a constant rather than a config knob.
ICP_PAIR_GATE = 1.0


def icp_refine(query_points: np.ndarray, map_points: np.ndarray, T_init: SE3,
               cfg: IcpConfig) -> tuple[SE3, float]:
    """Point-to-point ICP; returns (total correction relative to T_init, final rms).

    The correction C satisfies T_final = C o T_init; its translation magnitude is the
    localization-error proxy used by the evaluation. The rms covers the gated pairs
    (all pairs when none fall inside the gate).
    """
    q = np.asarray(query_points, dtype=np.float64).reshape(-1, 3)
    m = np.asarray(map_points, dtype=np.float64).reshape(-1, 3)
    if len(q) == 0 or len(m) == 0:
        raise ValueError("ICP needs two non-empty clouds")
    tree = cKDTree(m)
    T = T_init
    for _ in range(cfg.max_iter):
        moved = T.apply(q)
        dist, nn = tree.query(moved)
        keep = dist <= ICP_PAIR_GATE
        if keep.sum() < 3:
            break
        mq = moved[keep]
        mm = m[nn[keep]]
        H = (mq - mq.mean(axis=0)).T @ (mm - mm.mean(axis=0))
        U, _, Vt = np.linalg.svd(H)
        d = np.sign(np.linalg.det(Vt.T @ U.T))
        R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
        t = mm.mean(axis=0) - R @ mq.mean(axis=0)
        step = SE3(R, t)
        T = step @ T
        if np.linalg.norm(step.translation) < cfg.tol:
            break
    dist, _ = tree.query(T.apply(q))
    keep = dist <= ICP_PAIR_GATE
    rms = float(np.sqrt(np.mean(dist[keep] ** 2 if keep.any() else dist**2)))
    return T @ T_init.inverse(), rms
