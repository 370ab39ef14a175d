"""Range-image construction, ground labeling, and depth-discontinuity segmentation.

One laser revolution is rasterized into a beams x columns grid; ground cells are
peeled off column-wise by inclination, and the remaining cells are flood-filled into
connected components wherever the angle criterion says two neighboring returns lie
on the same surface.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .geometry import LidarIntrinsics, spherical_project_points
from .kitti import Scan


@dataclass
class SegmentationConfig:
    theta_seg: float = math.radians(10.0)     # neighbor merge threshold on the beta angle
    tau_ground: float = math.radians(10.0)    # max inclination for ground
    min_segment_points: int = 40
    max_segment_points: int = 15000
    sensor_height: float = 1.5                # sensor above local ground, for the ground seed

    def __post_init__(self):
        if not (0.0 < self.theta_seg < math.pi / 2.0):
            raise ValueError("theta_seg must be in (0, pi/2)")
        if self.min_segment_points >= self.max_segment_points:
            raise ValueError("min_segment_points must be < max_segment_points")


@dataclass
class RangeImage:
    """Grid of ranges (0 = empty) with a parallel map back to scan point indices."""

    intrinsics: LidarIntrinsics
    range: np.ndarray        # (rows, cols) float64, 0 where empty
    point_index: np.ndarray  # (rows, cols) int64, -1 where empty
    points: np.ndarray       # (N, 3) the source scan points
    dropped: int = 0         # points lost to range gates, beam gating, or cell collisions

    @property
    def rows(self) -> int:
        return self.range.shape[0]

    @property
    def cols(self) -> int:
        return self.range.shape[1]


@dataclass
class Segment:
    """A connected subset of one scan's points with its centroid."""

    id: int
    points: np.ndarray   # (N, 3)
    centroid: np.ndarray  # (3,)
    scan_id: int
    frame: str = "sensor"  # sensor | world

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.centroid = np.asarray(self.centroid, dtype=np.float64).reshape(3)

    def __len__(self) -> int:
        return len(self.points)


def make_segment(seg_id: int, points: np.ndarray, scan_id: int, frame: str = "sensor") -> Segment:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return Segment(seg_id, pts, pts.mean(axis=0), scan_id, frame)


def build_range_image(scan: Scan, intr: LidarIntrinsics) -> RangeImage:
    """Place every scan point into its range-image cell; the nearer point wins collisions."""
    rows = intr.n_beams
    cols = intr.azimuth_columns
    grid = np.zeros((rows, cols))
    index = np.full((rows, cols), -1, dtype=np.int64)
    if len(scan) == 0:
        return RangeImage(intr, grid, index, scan.points, 0)
    r, c, ok = spherical_project_points(intr, scan.points)
    rng = np.linalg.norm(scan.points, axis=1)
    dropped = int(np.count_nonzero(~ok))
    order = np.argsort(-rng[ok], kind="stable")  # nearest written last -> wins
    rr, cc, ii = r[ok][order], c[ok][order], np.flatnonzero(ok)[order]
    grid[rr, cc] = rng[ok][order]
    index[rr, cc] = ii
    placed = int(np.count_nonzero(index >= 0))
    dropped += int(np.count_nonzero(ok)) - placed
    return RangeImage(intr, grid, index, scan.points, dropped)


def label_ground(img: RangeImage, cfg: SegmentationConfig) -> np.ndarray:
    """Column-wise ground mask.

    Walking each column from the bottom beam up, a cell joins the ground iff the
    displacement from the previous ground cell stays within tau_ground of horizontal.
    The bottom-most return seeds only if its inclination from the point at ground
    height below the sensor passes the same gate.
    """
    mask = np.zeros(img.range.shape, dtype=bool)
    pts = img.points
    ground_origin_z = -cfg.sensor_height
    for col in range(img.cols):
        prev: np.ndarray | None = None
        seeded = False
        for row in range(img.rows - 1, -1, -1):
            pi = img.point_index[row, col]
            if pi < 0:
                continue
            p = pts[pi]
            if prev is None:
                if seeded:
                    continue  # seed cell failed: this column grows no ground
                seeded = True
                dz = p[2] - ground_origin_z
                dxy = math.hypot(p[0], p[1])
            else:
                dz = p[2] - prev[2]
                dxy = math.hypot(p[0] - prev[0], p[1] - prev[1])
            if abs(math.atan2(dz, dxy)) <= cfg.tau_ground:
                mask[row, col] = True
                prev = p
    return mask


def beta_angle(d1: float, d2: float, alpha: float) -> float:
    """Angle of the surface through two neighboring returns, relative to the farther ray.

    d1 >= d2 is enforced, making the criterion symmetric in its two cells.
    """
    hi, lo = (d1, d2) if d1 >= d2 else (d2, d1)
    return math.atan2(lo * math.sin(alpha), hi - lo * math.cos(alpha))


def segment(img: RangeImage, ground: np.ndarray, cfg: SegmentationConfig,
            scan_id: int = 0) -> list[Segment]:
    """Flood-fill non-ground cells into segments using the beta-angle merge criterion.

    4-neighborhood with azimuth wrap-around; empty cells block connectivity. Components
    outside [min_segment_points, max_segment_points] are discarded.
    """
    rows, cols = img.range.shape
    elev = img.intrinsics.beam_elevations
    alpha_h = img.intrinsics.azimuth_step
    visited = ground | (img.point_index < 0)
    segments: list[Segment] = []
    seg_id = 0
    for r0 in range(rows):
        for c0 in range(cols):
            if visited[r0, c0]:
                continue
            component = []
            queue = deque([(r0, c0)])
            visited[r0, c0] = True
            while queue:
                r, c = queue.popleft()
                component.append(img.point_index[r, c])
                d_here = img.range[r, c]
                for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    nr = r + dr
                    nc = (c + dc) % cols
                    if nr < 0 or nr >= rows or visited[nr, nc]:
                        continue
                    alpha = alpha_h if dr == 0 else abs(elev[r] - elev[nr])
                    if beta_angle(d_here, img.range[nr, nc], alpha) > cfg.theta_seg:
                        visited[nr, nc] = True
                        queue.append((nr, nc))
            if cfg.min_segment_points <= len(component) <= cfg.max_segment_points:
                segments.append(make_segment(seg_id, img.points[component], scan_id))
                seg_id += 1
    return segments


def segment_scan(scan: Scan, intr: LidarIntrinsics,
                 cfg: SegmentationConfig) -> tuple[list[Segment], RangeImage, np.ndarray]:
    """Full front-end for one scan: range image, ground mask, segments."""
    img = build_range_image(scan, intr)
    ground = label_ground(img, cfg)
    return segment(img, ground, cfg, scan_id=scan.id), img, ground


def dump_segments_ply(segments: list[Segment], path) -> None:
    """ASCII PLY with a per-point segment-id scalar, for quick visual inspection."""
    total = sum(len(s) for s in segments)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {total}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property int segment_id\nend_header\n")
        for s in segments:
            for p in s.points:
                f.write(f"{p[0]:.4f} {p[1]:.4f} {p[2]:.4f} {s.id}\n")
