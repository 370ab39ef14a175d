"""Scan-to-pose orchestration: segmentation, description, matching, verification.

Also the map builder, which runs the same front end over a posed trajectory, moves
segments into the world frame, and deduplicates revisited structure before indexing.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import tomli

from .descriptors import DescriptorBackend, make_backend
from .errors import ConfigError, DataError
from .geometry import LidarIntrinsics, SE3, load_calibration
from .kitti import Scan, TrajectoryEntry, vlp16_intrinsics
from .mapdb import MapMetadata, SegmentMap, build_map
from .segmentation import Segment, SegmentationConfig, segment_scan
from .verification import IcpConfig, PoseEstimate, VerificationConfig, verify


@dataclass
class MatchingConfig:
    k: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class DedupConfig:
    radius: float = 0.5              # world centroid merge radius, meters
    descriptor_percentile: float = 10.0

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if not (0.0 <= self.descriptor_percentile <= 100.0):
            raise ValueError("descriptor_percentile must be a percentage")


@dataclass
class DatasetPaths:
    scan_dir: Optional[Path] = None
    poses: Optional[Path] = None
    calibration: Optional[Path] = None


@dataclass
class PipelineConfig:
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    verification: VerificationConfig = field(default_factory=VerificationConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    dedup: DedupConfig = field(default_factory=DedupConfig)
    descriptor_backend: str = "handcrafted"
    embedding_path: Optional[Path] = None
    include_points: bool = True
    dataset: DatasetPaths = field(default_factory=DatasetPaths)
    intrinsics: LidarIntrinsics = field(default_factory=vlp16_intrinsics)

    def make_backend(self) -> DescriptorBackend:
        return make_backend(self.descriptor_backend, self.embedding_path)


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(sec)


def _build(cls, sec: dict, name: str, **convert):
    for key in sec:
        if key not in cls.__dataclass_fields__ and key not in convert:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
    kwargs = {}
    for key, val in sec.items():
        if key in convert:
            dest, fn = convert[key]
            kwargs[dest] = fn(val)
        else:
            kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad [{name}] config: {e}") from e


def load_pipeline_config(path) -> PipelineConfig:
    """Parse and validate a pipeline TOML file.

    Angles are written in degrees (theta_seg_deg, tau_ground_deg) and converted here.
    Relative paths resolve against the config file's directory; every referenced file
    must exist at load time.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from e

    base = path.parent

    def resolve(p, must_be=None) -> Path:
        out = (base / p).resolve() if not Path(p).is_absolute() else Path(p)
        if must_be == "file" and not out.is_file():
            raise ConfigError(f"referenced file does not exist: {out}")
        if must_be == "dir" and not out.is_dir():
            raise ConfigError(f"referenced directory does not exist: {out}")
        return out

    seg = _build(SegmentationConfig, _section(raw, "segmentation"), "segmentation",
                 theta_seg_deg=("theta_seg", math.radians),
                 tau_ground_deg=("tau_ground", math.radians))
    matching = _build(MatchingConfig, _section(raw, "matching"), "matching")
    ver = _build(VerificationConfig, _section(raw, "verification"), "verification")
    icp = _build(IcpConfig, _section(raw, "icp"), "icp")

    map_sec = _section(raw, "map")
    dedup = _build(DedupConfig,
                   {k: v for k, v in map_sec.items() if k != "include_points"}, "map",
                   dedup_radius=("radius", float),
                   dedup_descriptor_percentile=("descriptor_percentile", float))
    include_points = bool(map_sec.get("include_points", True))

    desc_sec = _section(raw, "descriptor")
    backend = desc_sec.pop("backend", "handcrafted")
    embedding_path = desc_sec.pop("embedding_file", None)
    if desc_sec:
        raise ConfigError(f"unknown key {sorted(desc_sec)[0]!r} in [descriptor]")
    if backend not in ("handcrafted", "embedding-file"):
        raise ConfigError(f"unknown descriptor backend {backend!r}")
    if backend == "embedding-file":
        if embedding_path is None:
            raise ConfigError("[descriptor] embedding_file is required for the "
                              "embedding-file backend")
        embedding_path = resolve(embedding_path, "file")
    elif embedding_path is not None:
        embedding_path = resolve(embedding_path, "file")

    ds_sec = _section(raw, "dataset")
    for key in ds_sec:
        if key not in ("scan_dir", "poses", "calibration"):
            raise ConfigError(f"unknown key {key!r} in [dataset]")
    dataset = DatasetPaths(
        scan_dir=resolve(ds_sec["scan_dir"], "dir") if "scan_dir" in ds_sec else None,
        poses=resolve(ds_sec["poses"], "file") if "poses" in ds_sec else None,
        calibration=resolve(ds_sec["calibration"], "file") if "calibration" in ds_sec else None,
    )

    if dataset.calibration is not None:
        intrinsics, _ = load_calibration(dataset.calibration)
    else:
        intrinsics = vlp16_intrinsics()

    return PipelineConfig(segmentation=seg, matching=matching, verification=ver,
                          icp=icp, dedup=dedup, descriptor_backend=backend,
                          embedding_path=embedding_path, include_points=include_points,
                          dataset=dataset, intrinsics=intrinsics)


@dataclass
class LocalizationResult:
    scan_id: int
    estimate: PoseEstimate
    timings_ms: dict[str, float]
    n_segments: int = 0
    n_candidates: int = 0

    @property
    def accepted(self) -> bool:
        return self.estimate.accepted


STAGES = ("segmentation", "description", "matching", "verification")


def result_to_json(res: LocalizationResult) -> dict:
    """Flat dict for one-line JSON emission; the 4x4 pose is row-major."""
    est = res.estimate
    return {
        "scan_id": res.scan_id,
        "accepted": est.accepted,
        "T_map_query": [float(v) for v in est.T_map_query.matrix().reshape(-1)],
        "clique_size": est.clique_size,
        "rms_residual": est.rms_residual,
        "timings_ms": {k: float(v) for k, v in res.timings_ms.items()},
        "reason": est.reason,
        "n_segments": res.n_segments,
        "n_candidates": res.n_candidates,
    }


def result_from_json(row: dict) -> LocalizationResult:
    try:
        T = SE3.from_matrix(np.asarray(row["T_map_query"], dtype=np.float64).reshape(4, 4))
        est = PoseEstimate(T, accepted=bool(row["accepted"]),
                           rms_residual=float(row.get("rms_residual", 0.0)),
                           reason=row.get("reason", ""))
        est.inliers = [None] * int(row.get("clique_size", 0))  # size survives, members do not
        return LocalizationResult(int(row["scan_id"]), est,
                                  dict(row.get("timings_ms", {})),
                                  int(row.get("n_segments", 0)),
                                  int(row.get("n_candidates", 0)))
    except (KeyError, ValueError) as e:
        raise DataError(f"malformed result row: {e}") from e


def localize_scan(smap: SegmentMap, scan: Scan, cfg: PipelineConfig,
                  backend: Optional[DescriptorBackend] = None) -> LocalizationResult:
    """One scan against one map. Content-empty scans reject cleanly; only a
    backend/map dimension mismatch raises."""
    if backend is None:
        backend = cfg.make_backend()
    if backend.dim != smap.metadata.dim:
        raise ConfigError(f"descriptor backend dim {backend.dim} does not match "
                          f"map dim {smap.metadata.dim}")
    timings = dict.fromkeys(STAGES, 0.0)

    def rejected(reason: str, n_segments=0, n_candidates=0) -> LocalizationResult:
        est = PoseEstimate(SE3.identity(), reason=reason)
        return LocalizationResult(scan.id, est, timings, n_segments, n_candidates)

    t0 = time.perf_counter()
    segments, _, _ = segment_scan(scan, cfg.intrinsics, cfg.segmentation)
    timings["segmentation"] = (time.perf_counter() - t0) * 1e3
    if not segments:
        return rejected("segmentation: no segments")

    t0 = time.perf_counter()
    described = []
    for seg in segments:
        d = backend.describe(seg)
        if d is not None:
            described.append((seg, d))
    timings["description"] = (time.perf_counter() - t0) * 1e3
    if not described:
        return rejected("description: no descriptors", len(segments))

    t0 = time.perf_counter()
    candidates = []
    for seg, d in described:
        candidates.extend(smap.knn(d, cfg.matching.k, seg.id, seg.centroid))
    timings["matching"] = (time.perf_counter() - t0) * 1e3
    if not candidates:
        return rejected("matching: no candidates", len(segments))

    t0 = time.perf_counter()
    estimate = verify(candidates, cfg.verification)
    timings["verification"] = (time.perf_counter() - t0) * 1e3
    if not estimate.accepted:
        estimate.reason = f"verification: {estimate.reason}"
    return LocalizationResult(scan.id, estimate, timings, len(segments), len(candidates))


def transform_segment(seg: Segment, T: SE3, frame: str) -> Segment:
    pts = T.apply(seg.points)
    return Segment(seg.id, pts, pts.mean(axis=0), seg.scan_id, frame)


Trajectory = Union[list[TrajectoryEntry], dict[int, SE3]]


def _pose_lookup(trajectory: Trajectory) -> dict[int, SE3]:
    if isinstance(trajectory, dict):
        return trajectory
    return {e.scan_id: e.T_world_sensor for e in trajectory}


def build_map_from_trajectory(scans: list[Scan], trajectory: Trajectory,
                              cfg: PipelineConfig,
                              backend: Optional[DescriptorBackend] = None) -> SegmentMap:
    """Segment every posed scan, describe in the sensor frame, keep world-frame
    geometry, deduplicate revisits, and index the result.

    Dedup: a new segment merges into an existing one when their world centroids lie
    within `dedup.radius` and their descriptor distance falls below the configured
    percentile of all pairwise descriptor distances; the larger segment survives.
    """
    if backend is None:
        backend = cfg.make_backend()
    poses = _pose_lookup(trajectory)

    entries: list[tuple[Segment, np.ndarray]] = []  # (world-frame segment, descriptor)
    for scan in scans:
        if scan.id not in poses:
            raise DataError(f"no pose for scan {scan.id}")
        segments, _, _ = segment_scan(scan, cfg.intrinsics, cfg.segmentation)
        for seg in segments:
            d = backend.describe(seg)
            if d is None:
                continue
            entries.append((transform_segment(seg, poses[scan.id], "world"), d))
    if not entries:
        raise DataError("trajectory produced no describable segments")

    kept = _deduplicate(entries, cfg.dedup)
    segments = [Segment(i, seg.points, seg.centroid, seg.scan_id, "world")
                for i, (seg, _) in enumerate(kept)]
    descriptors = [d for _, d in kept]
    meta = MapMetadata(backend=backend.name, dim=backend.dim)
    return build_map(segments, descriptors, meta)


def _deduplicate(entries: list[tuple[Segment, np.ndarray]],
                 cfg: DedupConfig) -> list[tuple[Segment, np.ndarray]]:
    if len(entries) < 2:
        return list(entries)
    desc = np.stack([d for _, d in entries])
    diff = desc[:, None, :] - desc[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    threshold = float(np.percentile(dist[np.triu_indices(len(entries), k=1)],
                                    cfg.descriptor_percentile))
    centroids = np.stack([seg.centroid for seg, _ in entries])

    kept: list[int] = []  # rows of `entries` that survive
    for i, (seg, _) in enumerate(entries):
        merge_at = -1
        best = np.inf
        for slot, j in enumerate(kept):
            gap = float(np.linalg.norm(centroids[i] - centroids[j]))
            # <= so a two-entry database (threshold == its only distance) can merge
            if gap <= cfg.radius and dist[i, j] <= threshold and gap < best:
                best = gap
                merge_at = slot
        if merge_at < 0:
            kept.append(i)
        elif len(seg.points) > len(entries[kept[merge_at]][0].points):
            kept[merge_at] = i
    return [entries[i] for i in kept]
