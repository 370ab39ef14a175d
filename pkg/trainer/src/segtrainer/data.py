"""Training data: exported pipeline artifacts and a synthetic toy benchmark.

An export directory (produced by the pipeline's export-training command) holds
voxels/scan{S}_seg{G}.osvx files plus groups.csv; optionally patches/ with PNG
crops and patch_index.csv. The toy benchmark generates box and cylinder shape
classes directly as voxel grids so the training loop can be exercised without
any pipeline run.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .formats import VOXEL_DIMS, load_groups_csv, load_patch_index, load_voxel_grid
from .models import PATCH_SIZE


@dataclass
class TrainingSample:
    key: tuple[int, int]          # (scan_id, segment_id)
    voxels: np.ndarray            # (32, 32, 16) bool occupancy
    group: int
    patch: Optional[np.ndarray] = None  # (140, 140) float32 in [0, 1]


def load_export_dir(path, with_patches: bool = False) -> list[TrainingSample]:
    """Load every exported sample; voxel files must exist for every group row."""
    root = Path(path)
    groups = load_groups_csv(root / "groups.csv")
    patch_info = {}
    if with_patches:
        index = root / "patches" / "patch_index.csv"
        if index.is_file():
            patch_info = load_patch_index(index)
    samples = []
    for (scan_id, seg_id), group in sorted(groups.items()):
        vox_path = root / "voxels" / f"scan{scan_id}_seg{seg_id}.osvx"
        if not vox_path.is_file():
            raise DataError(f"missing voxel file {vox_path}")
        grid = load_voxel_grid(vox_path)
        patch = None
        if (scan_id, seg_id) in patch_info:
            patch = _load_patch(root / "patches" / patch_info[(scan_id, seg_id)]["file"])
        samples.append(TrainingSample((scan_id, seg_id), grid.occupancy, group, patch))
    return samples


def _load_patch(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        gray = img.convert("L").resize((PATCH_SIZE, PATCH_SIZE))
    return np.asarray(gray, dtype=np.float32) / 255.0


# --- toy shape benchmark --------------------------------------------------------------

# 10 box classes (edge lengths) and 10 cylinder classes (radius, height),
# chosen so no two classes share a bounding box.
BOX_CLASSES = [
    (0.6, 0.6, 2.4), (1.2, 0.6, 1.2), (2.4, 0.8, 0.8), (1.8, 1.8, 0.6),
    (0.8, 0.8, 0.8), (2.8, 1.4, 2.0), (1.0, 2.0, 3.0), (3.2, 0.6, 1.6),
    (1.6, 1.6, 1.6), (2.2, 2.2, 2.8),
]
CYLINDER_CLASSES = [
    (0.3, 2.4), (0.6, 1.2), (0.9, 0.9), (1.2, 2.0), (0.4, 0.8),
    (1.5, 1.0), (0.8, 2.8), (1.1, 0.5), (0.5, 1.8), (1.4, 2.6),
]


def _box_surface(rng: np.random.Generator, dims, n: int) -> np.ndarray:
    lx, ly, lz = dims
    areas = np.array([ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u, v = rng.uniform(-0.5, 0.5, (2, n))
    pts = np.empty((n, 3))
    for i, f in enumerate(face):
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        coords = [u[i], v[i]]
        pts[i, axis] = 0.5 * sign
        others = [a for a in range(3) if a != axis]
        pts[i, others[0]] = coords[0]
        pts[i, others[1]] = coords[1]
    return pts * np.array([lx, ly, lz])


def _cylinder_surface(rng: np.random.Generator, radius: float, height: float,
                      n: int) -> np.ndarray:
    lateral = 2.0 * np.pi * radius * height
    caps = 2.0 * np.pi * radius ** 2
    n_lat = int(round(n * lateral / (lateral + caps)))
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    pts = np.empty((n, 3))
    pts[:n_lat, 0] = radius * np.cos(theta[:n_lat])
    pts[:n_lat, 1] = radius * np.sin(theta[:n_lat])
    pts[:n_lat, 2] = rng.uniform(-0.5, 0.5, n_lat) * height
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n - n_lat))
    pts[n_lat:, 0] = r * np.cos(theta[n_lat:])
    pts[n_lat:, 1] = r * np.sin(theta[n_lat:])
    pts[n_lat:, 2] = np.where(rng.random(n - n_lat) < 0.5, -0.5, 0.5) * height
    return pts


def voxelize_points(points: np.ndarray) -> np.ndarray:
    """Occupancy on the canonical 32x32x16 grid, mirroring the exporter: z stays
    vertical, x follows the dominant horizontal eigenvector (sign fixed by the
    third moment), and the voxel size is the smallest that fits the box."""
    pts = points - points.mean(axis=0)
    xy = pts[:, :2]
    cov = xy.T @ xy / len(xy)
    _, vecs = np.linalg.eigh(cov)
    u = vecs[:, -1]
    proj = xy @ u
    if np.sum(proj ** 3) < 0:
        u = -u
    rot = np.array([[u[0], u[1], 0.0], [-u[1], u[0], 0.0], [0.0, 0.0, 1.0]])
    aligned = pts @ rot.T
    lo = aligned.min(axis=0)
    extent = aligned.max(axis=0) - lo
    size = max(extent[0] / 32, extent[1] / 32, extent[2] / 16) * (1.0 + 1e-9)
    size = max(size, 1e-6)
    idx = np.floor((aligned - lo) / size).astype(np.int64)
    idx = np.minimum(idx, np.array(VOXEL_DIMS) - 1)
    occ = np.zeros(VOXEL_DIMS, dtype=bool)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return occ


def make_toy_dataset(seed: int = 0, n_classes: int = 20,
                     per_class: int = 30, n_points: int = 800) -> list[TrainingSample]:
    """Shape classes rendered as jittered, partially dropped-out surface clouds."""
    if n_classes > len(BOX_CLASSES) + len(CYLINDER_CLASSES):
        raise ConfigError(f"at most {len(BOX_CLASSES) + len(CYLINDER_CLASSES)} "
                          "toy classes available")
    rng = np.random.default_rng(seed)
    samples = []
    for cls in range(n_classes):
        for i in range(per_class):
            if cls < len(BOX_CLASSES):
                pts = _box_surface(rng, BOX_CLASSES[cls], n_points)
            else:
                radius, height = CYLINDER_CLASSES[cls - len(BOX_CLASSES)]
                pts = _cylinder_surface(rng, radius, height, n_points)
            pts = pts * rng.uniform(0.95, 1.05)
            yaw = rng.uniform(0.0, 2.0 * np.pi)
            c, s = np.cos(yaw), np.sin(yaw)
            pts = pts @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T
            pts = pts + rng.normal(0.0, 0.01, pts.shape)
            keep = rng.random(len(pts)) < rng.uniform(0.7, 0.95)
            samples.append(TrainingSample((cls, i), voxelize_points(pts[keep]), cls))
    return samples


def split_holdout(samples: list[TrainingSample],
                  per_group_test: int) -> tuple[list[TrainingSample],
                                                list[TrainingSample]]:
    """Deterministic split: the last per_group_test samples of each group (by
    key order) are held out."""
    by_group: dict[int, list[TrainingSample]] = {}
    for s in sorted(samples, key=lambda s: s.key):
        by_group.setdefault(s.group, []).append(s)
    train, test = [], []
    for group in sorted(by_group):
        members = by_group[group]
        if len(members) <= per_group_test:
            raise DataError(f"group {group} has only {len(members)} members; "
                            f"cannot hold out {per_group_test}")
        train.extend(members[:-per_group_test])
        test.extend(members[-per_group_test:])
    return train, test


class TripletBatcher:
    """Draws P groups x K samples per step from the groups large enough to
    supply K distinct members."""

    def __init__(self, samples: list[TrainingSample], p: int, k: int,
                 rng: np.random.Generator):
        if p < 2 or k < 2:
            raise ConfigError("triplet batches need P >= 2 and K >= 2")
        self.samples = samples
        by_group: dict[int, list[int]] = {}
        for i, s in enumerate(samples):
            by_group.setdefault(s.group, []).append(i)
        self.eligible = {g: idx for g, idx in by_group.items() if len(idx) >= k}
        if len(self.eligible) < 2:
            raise DataError(f"insufficient groups: only {len(self.eligible)} "
                            f"have the {k} members a K={k} batch needs")
        self.p = min(p, len(self.eligible))
        self.k = k
        self.rng = rng
        self._group_ids = sorted(self.eligible)

    def next_indices(self) -> list[int]:
        chosen = self.rng.choice(self._group_ids, size=self.p, replace=False)
        out = []
        for g in chosen:
            members = self.eligible[g]
            out.extend(self.rng.choice(members, size=self.k, replace=False))
        return out
