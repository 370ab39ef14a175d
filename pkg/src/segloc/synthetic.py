"""Synthetic worlds with closed-form ray casting, used as the exact test substrate.

Primitives are deliberately restricted to boxes, vertical cylinders, and posed planes
so every simulated return can be checked against an analytic surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError
from .geometry import SE3, LidarIntrinsics, rot_z
from .kitti import Scan

_T_EPS = 1e-9


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in its own pose frame, centered at the pose origin."""

    pose: SE3
    size: np.ndarray  # (3,) full extents, meters

    def __post_init__(self):
        s = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(s <= 0):
            raise ValueError("box extents must be positive")
        object.__setattr__(self, "size", s)


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder: axis through (cx, cy), closed by caps at both z limits."""

    center: tuple[float, float]
    z_range: tuple[float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0 or self.z_range[1] <= self.z_range[0]:
            raise ValueError("cylinder needs positive radius and z_range[1] > z_range[0]")


@dataclass(frozen=True)
class Plane:
    """The z = 0 plane of the pose frame, infinite extent."""

    pose: SE3


Primitive = Box | Cylinder | Plane


@dataclass
class SyntheticWorld:
    objects: list[Primitive]
    ground_height: Optional[float] = 0.0

    def __post_init__(self):
        if len(self.objects) < 1:
            raise ValueError("a world needs at least one object")


def _ray_box(o: np.ndarray, d: np.ndarray, box: Box) -> np.ndarray:
    """Slab-test hit parameter per ray, +inf where the box is missed."""
    inv = box.pose.inverse()
    ob = inv.apply(o)
    db = d @ inv.rotation.T
    half = box.size / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - ob) / db
        t2 = (half - ob) / db
    near = np.nanmax(np.minimum(t1, t2), axis=1)
    far = np.nanmin(np.maximum(t1, t2), axis=1)
    # rays parallel to a slab: inside -> (-inf, +inf) from the division, handled by min/max
    axis_ok = np.all((np.abs(db) > 1e-15) | (np.abs(ob) <= half), axis=1)
    hit = axis_ok & (far >= np.maximum(near, 0.0))
    t = np.where(near > _T_EPS, near, far)
    return np.where(hit & (t > _T_EPS), t, np.inf)


def _ray_cylinder(o: np.ndarray, d: np.ndarray, cyl: Cylinder) -> np.ndarray:
    cx, cy = cyl.center
    z0, z1 = cyl.z_range
    ox, oy, oz = o[:, 0] - cx, o[:, 1] - cy, o[:, 2]
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    a = dx * dx + dy * dy
    b = 2.0 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - cyl.radius**2
    disc = b * b - 4.0 * a * c
    t_best = np.full(len(o), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        for sign in (-1.0, 1.0):
            t = (-b + sign * sq) / (2.0 * a)
            z = oz + t * dz
            ok = (disc >= 0.0) & (a > 1e-15) & (t > _T_EPS) & (z >= z0) & (z <= z1)
            t_best = np.where(ok & (t < t_best), t, t_best)
        for z_cap in (z0, z1):
            t = (z_cap - oz) / dz
            px, py = ox + t * dx, oy + t * dy
            ok = (np.abs(dz) > 1e-15) & (t > _T_EPS) & (px * px + py * py <= cyl.radius**2)
            t_best = np.where(ok & (t < t_best), t, t_best)
    return t_best


def _ray_plane(o: np.ndarray, d: np.ndarray, plane: Plane) -> np.ndarray:
    n = plane.pose.rotation[:, 2]
    p0 = plane.pose.translation
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((p0 - o) @ n) / denom
    return np.where((np.abs(denom) > 1e-15) & (t > _T_EPS), t, np.inf)


def _ray_ground(o: np.ndarray, d: np.ndarray, height: float) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (height - o[:, 2]) / d[:, 2]
    return np.where((np.abs(d[:, 2]) > 1e-15) & (t > _T_EPS), t, np.inf)


GROUND_LABEL = -1


def cast_rays(world: SyntheticWorld, origins: np.ndarray,
              dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit parameter and label per ray (object index, GROUND_LABEL, or no-hit inf)."""
    t_best = np.full(len(origins), np.inf)
    labels = np.full(len(origins), -2, dtype=np.int64)
    if world.ground_height is not None:
        tg = _ray_ground(origins, dirs, world.ground_height)
        closer = tg < t_best
        t_best = np.where(closer, tg, t_best)
        labels = np.where(closer, GROUND_LABEL, labels)
    for idx, obj in enumerate(world.objects):
        if isinstance(obj, Box):
            t = _ray_box(origins, dirs, obj)
        elif isinstance(obj, Cylinder):
            t = _ray_cylinder(origins, dirs, obj)
        else:
            t = _ray_plane(origins, dirs, obj)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        labels = np.where(closer, idx, labels)
    return t_best, labels


def simulate_scan(world: SyntheticWorld, pose: SE3, intr: LidarIntrinsics,
                  noise_sigma: float = 0.0, seed: int = 0, scan_id: int = 0,
                  timestamp: float = 0.0,
                  return_labels: bool = False):
    """Cast one ray per range-image cell from `pose` and return the sensor-frame scan.

    Zero noise is fully deterministic and seed independent; with noise the result is a
    pure function of (world, pose, seed). Rays with no hit inside the range gates
    produce no point.
    """
    dirs_sensor = _all_cell_directions(intr)
    dirs_world = dirs_sensor @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs_world.shape)
    t, labels = cast_rays(world, origins, dirs_world)
    hit = np.isfinite(t) & (t >= intr.min_range) & (t <= intr.max_range)
    r = t[hit]
    if noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        r = r + rng.normal(0.0, noise_sigma, size=len(r))
    points = dirs_sensor[hit] * r[:, None]
    scan = Scan(scan_id, points, None, timestamp)
    if return_labels:
        return scan, labels[hit]
    return scan


def _all_cell_directions(intr: LidarIntrinsics) -> np.ndarray:
    phi = intr.beam_elevations
    az = math.pi - (np.arange(intr.azimuth_columns) + 0.5) * intr.azimuth_step
    cos_phi = np.cos(phi)[:, None]
    d = np.empty((intr.n_beams, intr.azimuth_columns, 3))
    d[:, :, 0] = cos_phi * np.cos(az)[None, :]
    d[:, :, 1] = cos_phi * np.sin(az)[None, :]
    d[:, :, 2] = np.sin(phi)[:, None]
    return d.reshape(-1, 3)


def surface_distance(world: SyntheticWorld, points: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest primitive surface (used as a test oracle)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    best = np.full(len(p), np.inf)
    if world.ground_height is not None:
        best = np.minimum(best, np.abs(p[:, 2] - world.ground_height))
    for obj in world.objects:
        if isinstance(obj, Box):
            q = np.abs(obj.pose.inverse().apply(p)) - obj.size / 2.0
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(np.max(q, axis=1), 0.0)
            best = np.minimum(best, np.abs(outside + inside))
        elif isinstance(obj, Cylinder):
            dr = np.hypot(p[:, 0] - obj.center[0], p[:, 1] - obj.center[1]) - obj.radius
            dz = np.maximum(obj.z_range[0] - p[:, 2], p[:, 2] - obj.z_range[1])
            outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
            inside = np.minimum(np.maximum(dr, dz), 0.0)
            best = np.minimum(best, np.abs(outside + inside))
        else:
            n = obj.pose.rotation[:, 2]
            best = np.minimum(best, np.abs((p - obj.pose.translation) @ n))
    return best


# --- world generation -----------------------------------------------------------------

def make_world(seed: int, n_objects: int = 30, extent: float = 50.0,
               min_gap: float = 3.0) -> SyntheticWorld:
    """Random world of boxes and cylinders on flat ground, with a guaranteed object gap."""
    rng = np.random.default_rng(seed)
    objects: list[Primitive] = []
    centers: list[np.ndarray] = []
    attempts = 0
    while len(objects) < n_objects and attempts < 100 * n_objects:
        attempts += 1
        xy = rng.uniform(-extent / 2.0, extent / 2.0, size=2)
        if centers and np.min(np.linalg.norm(np.array(centers) - xy, axis=1)) < min_gap:
            continue
        if np.linalg.norm(xy) < 4.0:  # keep a clear area around path start
            continue
        centers.append(xy)
        if rng.random() < 0.6:
            size = rng.uniform([1.0, 1.0, 1.5], [3.5, 3.5, 4.5])
            yaw = rng.uniform(0.0, 2.0 * math.pi)
            pose = SE3(rot_z(yaw), np.array([xy[0], xy[1], size[2] / 2.0]))
            objects.append(Box(pose, size))
        else:
            radius = rng.uniform(0.5, 1.2)
            height = rng.uniform(2.0, 5.0)
            objects.append(Cylinder((xy[0], xy[1]), (0.0, height), radius))
    if len(objects) < n_objects:
        raise ConfigError(f"could not place {n_objects} objects with gap {min_gap} in {extent} m")
    return SyntheticWorld(objects=objects, ground_height=0.0)


def path_poses(start: np.ndarray, end: np.ndarray, n: int, height: float = 1.5,
               lateral_jitter: float = 0.0, yaw_jitter: float = 0.0,
               seed: int = 0) -> list[SE3]:
    """Equally spaced poses along a line, heading along the path."""
    rng = np.random.default_rng(seed)
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    heading = math.atan2(end[1] - start[1], end[0] - start[0])
    poses = []
    for i in range(n):
        a = i / max(n - 1, 1)
        xy = start + a * (end - start)
        if lateral_jitter > 0.0:
            xy = xy + rng.normal(0.0, lateral_jitter, size=2)
        yaw = heading + (rng.normal(0.0, yaw_jitter) if yaw_jitter > 0.0 else 0.0)
        poses.append(SE3(rot_z(yaw), np.array([xy[0], xy[1], height])))
    return poses


# --- TOML io --------------------------------------------------------------------------

def _rotation_from_z(normal: np.ndarray) -> np.ndarray:
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(z, n)
    c = float(z @ n)
    if np.linalg.norm(v) < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    K = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + K + K @ K / (1.0 + c)


def load_world(path) -> SyntheticWorld:
    import tomli

    try:
        with open(path, "rb") as f:
            doc = tomli.load(f)
    except (OSError, tomli.TOMLDecodeError) as e:
        raise ConfigError(f"cannot read world file {path}: {e}") from e
    objects: list[Primitive] = []
    try:
        for i, spec in enumerate(doc.get("objects", [])):
            kind = spec["type"]
            if kind == "box":
                center = np.asarray(spec["center"], dtype=np.float64)
                yaw = math.radians(float(spec.get("yaw_deg", 0.0)))
                objects.append(Box(SE3(rot_z(yaw), center), np.asarray(spec["size"])))
            elif kind == "cylinder":
                objects.append(Cylinder(tuple(spec["center"]), tuple(spec["z_range"]),
                                        float(spec["radius"])))
            elif kind == "plane":
                R = _rotation_from_z(spec.get("normal", [0.0, 0.0, 1.0]))
                objects.append(Plane(SE3(R, np.asarray(spec.get("point", [0.0, 0.0, 0.0])))))
            else:
                raise ConfigError(f"world object {i}: unknown type {kind!r}")
        ground = doc.get("ground_height", None)
        return SyntheticWorld(objects, None if ground is None else float(ground))
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"bad world file {path}: {e}") from e


def _fmt_list(vals) -> str:
    return "[" + ", ".join(f"{float(v):.9g}" for v in vals) + "]"


def save_world(world: SyntheticWorld, path) -> None:
    lines = []
    if world.ground_height is not None:
        lines.append(f"ground_height = {world.ground_height:.9g}")
    for obj in world.objects:
        lines.append("\n[[objects]]")
        if isinstance(obj, Box):
            yaw = math.degrees(math.atan2(obj.pose.rotation[1, 0], obj.pose.rotation[0, 0]))
            lines.append('type = "box"')
            lines.append(f"center = {_fmt_list(obj.pose.translation)}")
            lines.append(f"yaw_deg = {yaw:.9g}")
            lines.append(f"size = {_fmt_list(obj.size)}")
        elif isinstance(obj, Cylinder):
            lines.append('type = "cylinder"')
            lines.append(f"center = {_fmt_list(obj.center)}")
            lines.append(f"z_range = {_fmt_list(obj.z_range)}")
            lines.append(f"radius = {obj.radius:.9g}")
        else:
            lines.append('type = "plane"')
            lines.append(f"point = {_fmt_list(obj.pose.translation)}")
            lines.append(f"normal = {_fmt_list(obj.pose.rotation[:, 2])}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
