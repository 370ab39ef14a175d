"""KITTI odometry I/O: velodyne .bin scans, ground-truth pose files, beam subsampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .geometry import SE3, LidarIntrinsics, assign_beams

log = logging.getLogger(__name__)

RECORD_BYTES = 16  # four little-endian float32: x, y, z, intensity


@dataclass
class Scan:
    """One LiDAR revolution in the sensor frame."""

    id: int
    points: np.ndarray                    # (N, 3) float64, meters
    intensities: Optional[np.ndarray] = None  # (N,) reflectance
    timestamp: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.intensities is not None:
            self.intensities = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
            if len(self.intensities) != len(self.points):
                raise ValueError("intensities length must match point count")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class TrajectoryEntry:
    scan_id: int
    T_world_sensor: SE3


def read_kitti_scan(path, scan_id: int = 0, timestamp: float = 0.0) -> Scan:
    """Parse a velodyne .bin file: packed (x, y, z, intensity) float32 records."""
    try:
        # fromfile would silently drop a trailing partial item, so size-check the
        # file itself rather than what was read
        n_bytes = Path(path).stat().st_size
        if n_bytes % RECORD_BYTES != 0:
            raise DataError(
                f"scan {path}: file length {n_bytes} bytes is not a multiple of {RECORD_BYTES}"
            )
        raw = np.fromfile(path, dtype=np.float32)
    except OSError as e:
        raise DataError(f"cannot read scan {path}: {e}") from e
    if raw.size == 0:
        log.warning("scan %s is empty", path)
        return Scan(scan_id, np.zeros((0, 3)), np.zeros(0), timestamp)
    rec = raw.reshape(-1, 4).astype(np.float64)
    return Scan(scan_id, rec[:, :3], rec[:, 3], timestamp)


def write_kitti_scan(scan: Scan, path) -> None:
    """Write a scan in velodyne .bin layout (float32; missing intensities become 0)."""
    n = len(scan)
    rec = np.zeros((n, 4), dtype=np.float32)
    rec[:, :3] = scan.points.astype(np.float32)
    if scan.intensities is not None:
        rec[:, 3] = scan.intensities.astype(np.float32)
    rec.tofile(path)


def _project_to_rotation(R: np.ndarray) -> np.ndarray:
    # pose files carry limited precision; snap to the nearest proper rotation
    U, _, Vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(U @ Vt))
    return U @ np.diag([1.0, 1.0, d]) @ Vt


def read_kitti_poses(path, T_cam_lidar: Optional[SE3] = None) -> list[TrajectoryEntry]:
    """Read a KITTI pose file (12 numbers per line, row-major camera-frame 3x4).

    Each entry is composed with the camera-to-LiDAR calibration so the result is
    T_world_sensor for the LiDAR. Pass None for data already in the sensor frame.
    """
    entries = []
    try:
        with open(path, "r") as f:
            lines = f.readlines()
    except OSError as e:
        raise DataError(f"cannot read pose file {path}: {e}") from e
    for i, line in enumerate(lines):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise DataError(f"pose file {path}, line {i + 1}: expected 12 values, got {len(tokens)}")
        try:
            M = np.array([float(t) for t in tokens]).reshape(3, 4)
        except ValueError as e:
            raise DataError(f"pose file {path}, line {i + 1}: {e}") from e
        T_w_cam = SE3(_project_to_rotation(M[:, :3]), M[:, 3])
        T = T_w_cam if T_cam_lidar is None else T_w_cam @ T_cam_lidar
        entries.append(TrajectoryEntry(scan_id=i, T_world_sensor=T))
    return entries


def write_kitti_poses(poses: list[SE3], path) -> None:
    """Write sensor-frame poses as 12-number KITTI lines (identity camera calibration)."""
    with open(path, "w") as f:
        for T in poses:
            row = np.hstack([T.rotation, T.translation.reshape(3, 1)]).reshape(-1)
            f.write(" ".join(f"{v:.12e}" for v in row) + "\n")


def hdl64_intrinsics(azimuth_columns: int = 2048,
                     min_range: float = 2.0, max_range: float = 80.0) -> LidarIntrinsics:
    """Approximate Velodyne HDL-64E beam table: two 32-beam blocks, +2 deg down to -24.33 deg."""
    upper = np.linspace(2.0, -8.33, 32)
    lower = np.linspace(-8.83, -24.33, 32)
    return LidarIntrinsics(
        beam_elevations=np.deg2rad(np.concatenate([upper, lower])),
        azimuth_columns=azimuth_columns,
        min_range=min_range,
        max_range=max_range,
    )


def vlp16_intrinsics(azimuth_columns: int = 1800,
                     min_range: float = 0.5, max_range: float = 50.0) -> LidarIntrinsics:
    """VLP-16-like beam table: 16 beams, 2 degree spacing, +15 down to -15."""
    return LidarIntrinsics(
        beam_elevations=np.deg2rad(np.arange(15.0, -16.0, -2.0)),
        azimuth_columns=azimuth_columns,
        min_range=min_range,
        max_range=max_range,
    )


def subsample_beams(scan: Scan, intr_source: LidarIntrinsics,
                    target: LidarIntrinsics) -> Scan:
    """Keep only the source beams that best reproduce the target beam layout.

    Each target elevation selects its nearest source beam; points are kept iff their
    nearest source beam is in that selection.
    """
    src = intr_source.beam_elevations
    tgt = target.beam_elevations
    if tgt.max() > src.max() or tgt.min() < src.min():
        raise ConfigError(
            f"target FOV [{np.rad2deg(tgt.min()):.2f}, {np.rad2deg(tgt.max()):.2f}] deg "
            f"is not contained in source FOV "
            f"[{np.rad2deg(src.min()):.2f}, {np.rad2deg(src.max()):.2f}] deg"
        )
    kept = np.unique(np.abs(src[None, :] - tgt[:, None]).argmin(axis=1))
    if len(scan) == 0:
        return Scan(scan.id, scan.points, scan.intensities, scan.timestamp)
    r = np.linalg.norm(scan.points, axis=1)
    ok = r > 1e-9
    elev = np.zeros(len(scan))
    elev[ok] = np.arcsin(np.clip(scan.points[ok, 2] / r[ok], -1.0, 1.0))
    rows, _ = assign_beams(intr_source, elev)
    mask = np.isin(rows, kept) & ok
    inten = None if scan.intensities is None else scan.intensities[mask]
    return Scan(scan.id, scan.points[mask], inten, scan.timestamp)


def load_scan_directory(directory, pattern: str = "*.bin") -> list[Path]:
    """Sorted scan paths in a directory; the sort order defines scan ids."""
    paths = sorted(Path(directory).glob(pattern))
    if not paths:
        raise DataError(f"no scans matching {pattern!r} in {directory}")
    return paths
