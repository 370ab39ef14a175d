"""Rigid transforms, sensor models, and the two projections everything else uses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError

# behind-camera rejection threshold; avoids division blow-up at z -> 0
DEPTH_EPS = 1e-6
_SE3_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SE3:
    """Rigid transform: rotation (3x3, orthonormal, det +1) and translation (3,) in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("SE3 entries must be finite")
        if np.abs(R @ R.T - np.eye(3)).max() > _SE3_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _SE3_TOL:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @staticmethod
    def identity() -> "SE3":
        return SE3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(M: np.ndarray) -> "SE3":
        M = np.asarray(M, dtype=np.float64).reshape(4, 4)
        return SE3(M[:3, :3], M[:3, 3])

    @staticmethod
    def from_quaternion(q: np.ndarray, t: np.ndarray = (0.0, 0.0, 0.0)) -> "SE3":
        """Build from a (w, x, y, z) quaternion, normalized on read."""
        w, x, y, z = np.asarray(q, dtype=np.float64).reshape(4)
        n = math.sqrt(w * w + x * x + y * y + z * z)
        if n < 1e-12:
            raise ValueError("zero-norm quaternion")
        w, x, y, z = w / n, x / n, y / n, z / n
        R = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        return SE3(R, t)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "SE3":
        Rt = self.rotation.T
        return SE3(Rt, -Rt @ self.translation)

    def compose(self, other: "SE3") -> "SE3":
        """self after other: (self @ other).apply(p) == self.apply(other.apply(p))."""
        return SE3(self.rotation @ other.rotation,
                   self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "SE3") -> "SE3":
        return self.compose(other)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_of(R: np.ndarray) -> float:
    """Heading angle of a rotation, radians in (-pi, pi]."""
    return math.atan2(R[1, 0], R[0, 0])


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians in [0, pi]."""
    c = (np.trace(R) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    T_cam_lidar: SE3 = field(default_factory=SE3.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image dimensions must be positive")


def project_to_image(cam: PinholeCamera, p_lidar: np.ndarray) -> Optional[tuple[float, float]]:
    """Pixel (u, v) of a LiDAR-frame point, or None if behind the camera or off-image."""
    p = cam.T_cam_lidar.apply(np.asarray(p_lidar, dtype=np.float64))
    if p[2] <= DEPTH_EPS:
        return None
    u = cam.fx * p[0] / p[2] + cam.cx
    v = cam.fy * p[1] / p[2] + cam.cy
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        return None
    return (u, v)


def project_points_to_image(cam: PinholeCamera, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection: returns ((N, 2) pixels, (N,) in-view mask).

    Pixel rows for out-of-view points are left as zeros.
    """
    p = cam.T_cam_lidar.apply(np.asarray(pts, dtype=np.float64).reshape(-1, 3))
    z = p[:, 2]
    front = z > DEPTH_EPS
    uv = np.zeros((len(p), 2))
    zs = np.where(front, z, 1.0)
    uv[:, 0] = cam.fx * p[:, 0] / zs + cam.cx
    uv[:, 1] = cam.fy * p[:, 1] / zs + cam.cy
    valid = (
        front
        & (uv[:, 0] >= 0.0) & (uv[:, 0] < cam.width)
        & (uv[:, 1] >= 0.0) & (uv[:, 1] < cam.height)
    )
    uv[~valid] = 0.0
    return uv, valid


def back_project(cam: PinholeCamera, u: float, v: float, depth: float) -> np.ndarray:
    """Camera-frame pixel + depth back to a LiDAR-frame point."""
    p_cam = np.array([(u - cam.cx) * depth / cam.fx, (v - cam.cy) * depth / cam.fy, depth])
    return cam.T_cam_lidar.inverse().apply(p_cam)


@dataclass(frozen=True)
class LidarIntrinsics:
    """Beam layout of a spinning LiDAR: elevations ordered top to bottom (radians)."""

    beam_elevations: np.ndarray
    azimuth_columns: int
    min_range: float
    max_range: float

    def __post_init__(self):
        elev = np.asarray(self.beam_elevations, dtype=np.float64).reshape(-1)
        if len(elev) < 1 or np.any(np.diff(elev) >= 0):
            raise ValueError("beam elevations must be strictly decreasing (top to bottom)")
        if self.azimuth_columns < 8:
            raise ValueError("azimuth_columns must be >= 8")
        if not (0.0 < self.min_range < self.max_range):
            raise ValueError("need 0 < min_range < max_range")
        object.__setattr__(self, "beam_elevations", _frozen(elev))

    @property
    def n_beams(self) -> int:
        return len(self.beam_elevations)

    @property
    def azimuth_step(self) -> float:
        return 2.0 * math.pi / self.azimuth_columns


def assign_beams(intr: LidarIntrinsics, elevations: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-beam row per elevation plus a mask gating on half the local beam spacing.

    Ties between two equidistant beams go to the lower beam (larger row index).
    """
    elev = np.asarray(elevations, dtype=np.float64)
    beams = intr.beam_elevations
    n = len(beams)
    if n == 1:
        return np.zeros(elev.shape, dtype=np.int64), np.ones(elev.shape, dtype=bool)
    asc = beams[::-1]  # ascending for searchsorted
    j = np.clip(np.searchsorted(asc, elev), 1, n - 1)
    d_low = elev - asc[j - 1]
    d_high = asc[j] - elev
    pick_low = d_low <= d_high  # tie -> lower elevation
    a = np.where(pick_low, j - 1, j)
    rows = (n - 1) - a  # back to top-to-bottom indexing
    # gate: nearest elevation must be within half the spacing on the side of the residual
    dist = np.abs(elev - asc[a])
    spacing_up = np.where(a < n - 1, asc[np.minimum(a + 1, n - 1)] - asc[a], asc[-1] - asc[-2])
    spacing_dn = np.where(a > 0, asc[a] - asc[np.maximum(a - 1, 0)], asc[1] - asc[0])
    spacing = np.where(elev >= asc[a], spacing_up, spacing_dn)
    ok = dist <= spacing / 2.0
    return rows, ok


def spherical_project_points(
    intr: LidarIntrinsics, pts: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized range-image cell assignment: (rows, cols, valid mask)."""
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    r = np.linalg.norm(p, axis=1)
    in_range = (r >= intr.min_range) & (r <= intr.max_range)
    safe_r = np.where(in_range, r, 1.0)
    elev = np.arcsin(np.clip(p[:, 2] / safe_r, -1.0, 1.0))
    rows, row_ok = assign_beams(intr, elev)
    az = np.arctan2(p[:, 1], p[:, 0])
    cols = np.floor((math.pi - az) / (2.0 * math.pi) * intr.azimuth_columns).astype(np.int64)
    cols %= intr.azimuth_columns
    return rows, cols, in_range & row_ok


def spherical_project(intr: LidarIntrinsics, p: np.ndarray) -> Optional[tuple[int, int]]:
    """Range-image cell (row, col) of one point, or None if range- or elevation-gated."""
    rows, cols, ok = spherical_project_points(intr, np.asarray(p, dtype=np.float64).reshape(1, 3))
    if not ok[0]:
        return None
    return (int(rows[0]), int(cols[0]))


def cell_center_direction(intr: LidarIntrinsics, row: int, col: int) -> np.ndarray:
    """Unit ray through the center of a range-image cell, sensor frame."""
    phi = intr.beam_elevations[row]
    az = math.pi - (col + 0.5) * intr.azimuth_step
    c = math.cos(phi)
    return np.array([c * math.cos(az), c * math.sin(az), math.sin(phi)])


def _se3_from_toml(entry, section: str) -> SE3:
    try:
        if isinstance(entry, dict):
            q = entry["quaternion"]
            t = entry.get("translation", (0.0, 0.0, 0.0))
            return SE3.from_quaternion(q, t)
        arr = np.asarray(entry, dtype=np.float64)
        if arr.size != 16:
            raise ValueError(f"expected 16 values, got {arr.size}")
        return SE3.from_matrix(arr.reshape(4, 4))
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"bad transform in [{section}]: {e}") from e


def load_calibration(path) -> tuple[LidarIntrinsics, Optional[PinholeCamera]]:
    """Read a calibration TOML with a [lidar] section and an optional [camera] section."""
    import tomli

    try:
        with open(path, "rb") as f:
            doc = tomli.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read calibration file {path}: {e}") from e
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"calibration file {path} is not valid TOML: {e}") from e

    try:
        lid = doc["lidar"]
        intr = LidarIntrinsics(
            beam_elevations=np.deg2rad(np.asarray(lid["beam_elevations_deg"], dtype=np.float64)),
            azimuth_columns=int(lid["azimuth_columns"]),
            min_range=float(lid["min_range"]),
            max_range=float(lid["max_range"]),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"bad [lidar] section in {path}: {e}") from e

    cam = None
    if "camera" in doc:
        c = doc["camera"]
        try:
            T = SE3.identity()
            if "T_cam_lidar" in c:
                T = _se3_from_toml(c["T_cam_lidar"], "camera")
            cam = PinholeCamera(
                fx=float(c["fx"]), fy=float(c["fy"]),
                cx=float(c["cx"]), cy=float(c["cy"]),
                width=int(c["width"]), height=int(c["height"]),
                T_cam_lidar=T,
            )
        except (KeyError, ValueError, TypeError) as e:
            raise ConfigError(f"bad [camera] section in {path}: {e}") from e
    return intr, cam
