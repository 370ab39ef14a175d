"""Ground-truth labeling and metrics: overlap IoU, wake-up distance, localization
recall/precision with ICP error probes, and descriptor retrieval PR curves.

All outputs are plain CSV/JSON so plotting stays outside the package.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .geometry import SE3
from .kitti import Scan
from .mapdb import SegmentMap
from .pipeline import LocalizationResult, transform_segment
from .segmentation import Segment
from .verification import IcpConfig, icp_refine

log = logging.getLogger(__name__)

DEFAULT_VOXEL_SIZE = 0.2
DEFAULT_IOU_THRESHOLD = 0.3
CDF_RESOLUTION = 0.1
ERROR_BIN_WIDTH = 0.05


@dataclass(frozen=True)
class CorrespondenceLabel:
    scan_a: int
    segment_a: int
    scan_b: int
    segment_b: int
    overlap_iou: float
    is_match: bool


@dataclass(frozen=True)
class WakeupRecord:
    start_scan_id: int
    distance: float  # meters traveled until first success; inf if never

    def __post_init__(self):
        if self.distance < 0:
            raise ValueError("distance must be >= 0")


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


def voxel_iou(points_a: np.ndarray, points_b: np.ndarray,
              voxel_size: float = DEFAULT_VOXEL_SIZE) -> float:
    """Occupancy IoU of two point sets on a shared grid anchored at their joint
    minimum corner. Symmetric by construction."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        return 0.0
    origin = np.minimum(a.min(axis=0), b.min(axis=0))
    cells_a = _occupied_cells(a, origin, voxel_size)
    cells_b = _occupied_cells(b, origin, voxel_size)
    inter = len(cells_a & cells_b)
    union = len(cells_a | cells_b)
    return inter / union


def _occupied_cells(points: np.ndarray, origin: np.ndarray, voxel_size: float) -> set:
    idx = np.floor((points - origin) / voxel_size).astype(np.int64)
    return set(map(tuple, idx))


def label_correspondences(segments_a: list[Segment], segments_b: list[Segment],
                          poses: dict[int, SE3],
                          iou_threshold: float = DEFAULT_IOU_THRESHOLD,
                          voxel_size: float = DEFAULT_VOXEL_SIZE) -> list[CorrespondenceLabel]:
    """Label every cross pair by world-frame occupancy overlap.

    Far-apart pairs short-circuit to IoU 0 when their bounding spheres cannot touch.
    """
    world_a = [_to_world(s, poses) for s in segments_a]
    world_b = [_to_world(s, poses) for s in segments_b]
    radii_a = [_bounding_radius(s) for s in world_a]
    radii_b = [_bounding_radius(s) for s in world_b]
    labels = []
    for sa, ra, orig_a in zip(world_a, radii_a, segments_a):
        for sb, rb, orig_b in zip(world_b, radii_b, segments_b):
            gap = float(np.linalg.norm(sa.centroid - sb.centroid))
            if gap > ra + rb + voxel_size:
                iou = 0.0
            else:
                iou = voxel_iou(sa.points, sb.points, voxel_size)
            labels.append(CorrespondenceLabel(orig_a.scan_id, orig_a.id,
                                              orig_b.scan_id, orig_b.id,
                                              iou, iou >= iou_threshold))
    return labels


def _to_world(seg: Segment, poses: dict[int, SE3]) -> Segment:
    if seg.frame == "world":
        return seg
    if seg.scan_id not in poses:
        raise DataError(f"no pose for scan {seg.scan_id}")
    return transform_segment(seg, poses[seg.scan_id], "world")


def _bounding_radius(seg: Segment) -> float:
    return float(np.max(np.linalg.norm(seg.points - seg.centroid, axis=1)))


def success_flags(results: list[LocalizationResult], poses: dict[int, SE3],
                  success_radius: float) -> tuple[list[int], np.ndarray, np.ndarray]:
    """Per-result success = accepted AND translation error within the radius.

    Returns (scan ids sorted, success bools, translation errors; error is nan for
    rejected results)."""
    if not results:
        raise DataError("no results to evaluate")
    ordered = sorted(results, key=lambda r: r.scan_id)
    ids = [r.scan_id for r in ordered]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate scan ids in results")
    flags = np.zeros(len(ordered), dtype=bool)
    errors = np.full(len(ordered), np.nan)
    for i, res in enumerate(ordered):
        if res.scan_id not in poses:
            raise DataError(f"result scan {res.scan_id} has no ground-truth pose")
        if not res.accepted:
            continue
        t_est = res.estimate.T_map_query.translation
        t_gt = poses[res.scan_id].translation
        errors[i] = float(np.linalg.norm(t_est - t_gt))
        flags[i] = errors[i] <= success_radius
    return ids, flags, errors


def evaluate_wakeup(results: list[LocalizationResult], poses: dict[int, SE3],
                    success_radius: float = 2.0) -> tuple[list[WakeupRecord], np.ndarray]:
    """Distance from each start frame to the first success, plus its CDF.

    The CDF table has rows (distance_m, probability) on a 0.1 m grid spanning the
    trajectory's arc length.
    """
    ids, flags, _ = success_flags(results, poses, success_radius)
    positions = np.stack([poses[i].translation for i in ids])
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(steps)])

    records = []
    next_success_arc = math.inf
    for i in reversed(range(len(ids))):
        if flags[i]:
            next_success_arc = arc[i]
        dist = next_success_arc - arc[i] if math.isfinite(next_success_arc) else math.inf
        records.append(WakeupRecord(ids[i], dist))
    records.reverse()

    total = float(arc[-1])
    n_rows = int(math.floor(total / CDF_RESOLUTION + 1e-9)) + 1
    grid = np.arange(n_rows) * CDF_RESOLUTION
    dists = np.array([r.distance for r in records])
    cdf = np.array([np.mean(dists <= g + 1e-9) for g in grid])
    return records, np.column_stack([grid, cdf])


@dataclass
class LocalizationReport:
    n_queries: int
    n_accepted: int
    n_successes: int
    recall: float
    precision: float
    errors: list[tuple[int, float]]  # (scan_id, icp correction magnitude)
    error_mean: float
    error_std: float
    histogram_counts: np.ndarray
    histogram_edges: np.ndarray


def evaluate_localization(results: list[LocalizationResult], poses: dict[int, SE3],
                          smap: SegmentMap, query_scans: dict[int, Scan],
                          icp_cfg: Optional[IcpConfig] = None,
                          success_radius: float = 2.0,
                          icp_max_points: int = 4000) -> LocalizationReport:
    """Recall and precision at the success radius, with per-success ICP corrections.

    The correction magnitude (how far ICP moves the estimated pose) is the residual
    localization error; its histogram uses 0.05 m bins.
    """
    icp_cfg = icp_cfg or IcpConfig()
    ids, flags, _ = success_flags(results, poses, success_radius)
    n_accepted = sum(1 for r in results if r.accepted)
    n_success = int(np.sum(flags))
    recall = n_success / len(results)
    if n_accepted == 0:
        log.info("no accepted localizations; precision is 1 by convention")
        precision = 1.0
    else:
        precision = n_success / n_accepted

    map_points = _map_points(smap)
    by_id = {r.scan_id: r for r in results}
    errors: list[tuple[int, float]] = []
    for scan_id, ok in zip(ids, flags):
        if not ok:
            continue
        if scan_id not in query_scans:
            raise DataError(f"no query scan {scan_id} available for ICP")
        q = query_scans[scan_id].points
        if len(q) > icp_max_points:
            q = q[:: int(math.ceil(len(q) / icp_max_points))]
        correction, _ = icp_refine(q, map_points,
                                   by_id[scan_id].estimate.T_map_query, icp_cfg)
        errors.append((scan_id, float(np.linalg.norm(correction.translation))))

    vals = np.array([e for _, e in errors]) if errors else np.zeros(0)
    mean = float(vals.mean()) if len(vals) else 0.0
    std = float(vals.std()) if len(vals) else 0.0
    top = max(float(vals.max()), ERROR_BIN_WIDTH) if len(vals) else ERROR_BIN_WIDTH
    edges = np.arange(0.0, top + ERROR_BIN_WIDTH, ERROR_BIN_WIDTH)
    counts, edges = np.histogram(vals, bins=edges)
    return LocalizationReport(len(results), n_accepted, n_success, recall, precision,
                              errors, mean, std, counts, edges)


def _map_points(smap: SegmentMap) -> np.ndarray:
    if not smap.metadata.has_points or all(len(s.points) == 0 for s in smap.segments):
        raise DataError("map holds no points; rebuild it with include_points "
                        "to run ICP evaluation")
    return np.concatenate([s.points for s in smap.segments if len(s.points)])


def evaluate_retrieval(descriptors: dict[tuple[int, int], np.ndarray],
                       labels: list[CorrespondenceLabel]) -> tuple[list[PRPoint], float]:
    """Sweep the match-by-distance threshold over all observed pair distances.

    Only cross-scan pairs participate. A pair predicts "match" when its descriptor
    distance is at or below the threshold; recall requires at least one positive.
    AUC integrates precision over recall with a (0, 1) anchor.
    """
    dists = []
    truth = []
    for lab in labels:
        if lab.scan_a == lab.scan_b:
            continue
        ka, kb = (lab.scan_a, lab.segment_a), (lab.scan_b, lab.segment_b)
        if ka not in descriptors or kb not in descriptors:
            continue
        dists.append(float(np.linalg.norm(descriptors[ka] - descriptors[kb])))
        truth.append(lab.is_match)
    if not dists:
        raise DataError("no labeled cross-scan pairs with descriptors")
    dists = np.array(dists)
    truth = np.array(truth)
    n_pos = int(truth.sum())
    if n_pos == 0:
        raise DataError("no positive pairs; recall is undefined")

    points = []
    for t in np.unique(dists):
        predicted = dists <= t
        tp = int(np.sum(predicted & truth))
        n_pred = int(predicted.sum())
        precision = tp / n_pred if n_pred else 1.0
        points.append(PRPoint(float(t), precision, tp / n_pos))

    recalls = np.array([0.0] + [p.recall for p in points])
    precisions = np.array([1.0] + [p.precision for p in points])
    auc = float(np.trapezoid(precisions, recalls))
    return points, auc


def write_wakeup_cdf(table: np.ndarray, path) -> None:
    lines = ["distance_m,probability"]
    lines += [f"{d:.1f},{p:.6f}" for d, p in table]
    Path(path).write_text("\n".join(lines) + "\n")


def write_pr_curve(points: list[PRPoint], path) -> None:
    lines = ["threshold,precision,recall"]
    lines += [f"{p.threshold:.6f},{p.precision:.6f},{p.recall:.6f}" for p in points]
    Path(path).write_text("\n".join(lines) + "\n")


def write_loc_errors(errors: list[tuple[int, float]], path) -> None:
    lines = ["scan_id,icp_correction_m"]
    lines += [f"{sid},{err:.6f}" for sid, err in errors]
    Path(path).write_text("\n".join(lines) + "\n")


def write_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
