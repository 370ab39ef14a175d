"""Fixed-length segment descriptors and the artifacts the trainer consumes.

Two interchangeable backends: a deterministic hand-crafted 21-dim descriptor, and a
loader for externally trained embeddings keyed by (scan_id, segment_id). Also the
voxelizer and image-patch extractor whose exports feed descriptor training.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, DegenerateGeometry
from .geometry import PinholeCamera, project_points_to_image
from .segmentation import Segment

HANDCRAFTED_DIM = 21
EIG_CLAMP = 1e-12
VOXEL_DIMS = (32, 32, 16)
MIN_VISIBLE_FRACTION = 0.5

OSEM_MAGIC = b"OSEM"
OSVX_MAGIC = b"OSVX"


def _normalized_eigenvalues(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Descending eigenvalues of the point covariance, scaled to sum 1, plus eigenvectors."""
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w = w[order]
    v = v[:, order]
    total = w.sum()
    if total < EIG_CLAMP:
        raise DegenerateGeometry("all points identical: zero covariance")
    e = np.maximum(w / total, EIG_CLAMP)
    return e, v


def describe_handcrafted(seg: Segment) -> np.ndarray:
    """21-dim descriptor: eigenvalue shape features, oriented extents, size, height profile.

    Invariant to translation exactly and to rotation about the vertical axis up to
    eigen-solver jitter.
    """
    pts = seg.points
    if len(pts) < 4:
        raise DegenerateGeometry(f"segment {seg.id}: need >= 4 points, got {len(pts)}")
    e, v = _normalized_eigenvalues(pts)
    e1, e2, e3 = e
    features = np.array(
        [
            (e1 - e2) / e1,            # linearity
            (e2 - e3) / e1,            # planarity
            e3 / e1,                   # sphericity
            float((e1 * e2 * e3) ** (1.0 / 3.0)),  # omnivariance
            (e1 - e3) / e1,            # anisotropy
            float(-(e * np.log(e)).sum()),         # eigenentropy
            e3,                        # curvature change
        ]
    )
    centered = pts - pts.mean(axis=0)
    proj = centered @ v
    extents = np.sort(proj.max(axis=0) - proj.min(axis=0))[::-1]
    z = pts[:, 2]
    z_min, z_max = z.min(), z.max()
    if z_max - z_min < 1e-9:
        hist = np.zeros(10)
        hist[0] = 1.0
    else:
        hist, _ = np.histogram(z, bins=10, range=(z_min, z_max))
        hist = hist / hist.sum()
    return np.concatenate([features, extents, [np.log1p(len(pts))], hist])


@dataclass
class VoxelGrid:
    """32 x 32 x 16 occupancy grid in a vertically-aligned, covariance-oriented frame."""

    occupancy: np.ndarray   # bool, VOXEL_DIMS
    voxel_size: float
    origin: np.ndarray      # (3,) min corner, input-frame coordinates

    def __post_init__(self):
        if self.occupancy.shape != VOXEL_DIMS:
            raise ValueError(f"voxel grid must be {VOXEL_DIMS}, got {self.occupancy.shape}")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")


def _horizontal_alignment(points: np.ndarray) -> np.ndarray:
    """Rotation whose x-axis is the dominant horizontal eigenvector, z kept vertical.

    The x sign is fixed so the third central moment along it is >= 0.
    """
    centered = points - points.mean(axis=0)
    xy = centered[:, :2]
    cov = xy.T @ xy / max(len(points), 1)
    w, v = np.linalg.eigh(cov)
    u = v[:, int(np.argmax(w))]
    s = xy @ u
    if float(np.sum(s**3)) < 0.0:
        u = -u
    x_axis = np.array([u[0], u[1], 0.0])
    n = np.linalg.norm(x_axis)
    x_axis = x_axis / n if n > 1e-12 else np.array([1.0, 0.0, 0.0])
    z_axis = np.array([0.0, 0.0, 1.0])
    y_axis = np.cross(z_axis, x_axis)
    return np.stack([x_axis, y_axis, z_axis], axis=1)  # columns are the new axes


def voxelize(seg: Segment) -> VoxelGrid:
    """Occupancy grid of a segment, scaled so its aligned bounding box just fits."""
    pts = seg.points
    if len(pts) == 0:
        raise DegenerateGeometry("cannot voxelize an empty segment")
    basis = _horizontal_alignment(pts)
    aligned = (pts - pts.mean(axis=0)) @ basis
    lo = aligned.min(axis=0)
    hi = aligned.max(axis=0)
    ext = hi - lo
    dims = np.array(VOXEL_DIMS, dtype=np.float64)
    size = float(max((ext / dims).max(), 1e-3))
    idx = np.floor((aligned - lo) / size).astype(np.int64)
    idx = np.clip(idx, 0, (dims - 1).astype(np.int64))  # points on a face, float rounding
    occ = np.zeros(VOXEL_DIMS, dtype=bool)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    origin = pts.mean(axis=0) + basis @ lo
    return VoxelGrid(occ, size, origin)


@dataclass(frozen=True)
class ImagePatch:
    """Pixel-space crop window of a segment's projection into a camera image."""

    pixel_bbox: tuple[int, int, int, int]  # u_min, v_min, u_max, v_max
    visible_fraction: float
    image_id: int


def extract_patch(seg: Segment, cam: PinholeCamera, margin: float = 0.1,
                  image_id: int = 0) -> Optional[ImagePatch]:
    """Bounding box of the segment's visible projection, inflated by `margin`.

    Returns None when under half the points are in view or the raw box has no area.
    """
    uv, valid = project_points_to_image(cam, seg.points)
    frac = float(np.count_nonzero(valid)) / len(seg.points)
    if frac < MIN_VISIBLE_FRACTION:
        return None
    u = uv[valid, 0]
    v = uv[valid, 1]
    u0, u1 = float(u.min()), float(u.max())
    v0, v1 = float(v.min()), float(v.max())
    if u1 - u0 <= 0.0 or v1 - v0 <= 0.0:
        return None
    du = margin * (u1 - u0)
    dv = margin * (v1 - v0)
    bbox = (
        max(0, int(np.floor(u0 - du))),
        max(0, int(np.floor(v0 - dv))),
        min(cam.width, int(np.ceil(u1 + du))),
        min(cam.height, int(np.ceil(v1 + dv))),
    )
    if bbox[0] >= bbox[2] or bbox[1] >= bbox[3]:
        return None
    return ImagePatch(bbox, frac, image_id)


# --- embedding files (OSEM) -----------------------------------------------------------

def save_embeddings(embeddings: dict[tuple[int, int], np.ndarray], path) -> None:
    """Write descriptors keyed by (scan_id, segment_id) in the OSEM layout."""
    if not embeddings:
        raise ValueError("refusing to write an embedding file with no dimension")
    dims = {len(v) for v in embeddings.values()}
    if len(dims) != 1:
        raise ValueError(f"mixed descriptor dims {sorted(dims)}")
    dim = dims.pop()
    with open(path, "wb") as f:
        f.write(OSEM_MAGIC)
        f.write(struct.pack("<IIQ", 1, dim, len(embeddings)))
        for (scan_id, seg_id), vec in sorted(embeddings.items()):
            f.write(struct.pack("<II", scan_id, seg_id))
            f.write(np.asarray(vec, dtype="<f4").tobytes())


def load_embeddings(path) -> dict[tuple[int, int], np.ndarray]:
    """Read an OSEM embedding file into a (scan_id, segment_id) -> float32 vector map."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read embedding file {path}: {e}") from e
    if len(blob) < 20 or blob[:4] != OSEM_MAGIC:
        raise DataError(f"embedding file {path}: bad magic")
    version, dim, count = struct.unpack_from("<IIQ", blob, 4)
    if version != 1:
        raise DataError(f"embedding file {path}: unsupported version {version}")
    record = 8 + 4 * dim
    body = blob[20:]
    if len(body) != count * record:
        raise DataError(
            f"embedding file {path}: body is {len(body)} bytes, expected {count * record} "
            f"for {count} records of dim {dim} (dim/size mismatch)"
        )
    out: dict[tuple[int, int], np.ndarray] = {}
    for i in range(count):
        off = i * record
        scan_id, seg_id = struct.unpack_from("<II", body, off)
        key = (scan_id, seg_id)
        if key in out:
            raise DataError(f"embedding file {path}: duplicate key {key}")
        vec = np.frombuffer(body, dtype="<f4", count=dim, offset=off + 8).copy()
        out[key] = vec
    return out


# --- voxel-grid export (OSVX) ---------------------------------------------------------

def save_voxel_grid(grid: VoxelGrid, path) -> None:
    with open(path, "wb") as f:
        f.write(OSVX_MAGIC)
        f.write(struct.pack("<IIII", 1, *VOXEL_DIMS))
        f.write(struct.pack("<f", grid.voxel_size))
        f.write(np.asarray(grid.origin, dtype="<f4").tobytes())
        f.write(np.packbits(grid.occupancy.reshape(-1).astype(np.uint8)).tobytes())


def load_voxel_grid(path) -> VoxelGrid:
    blob = Path(path).read_bytes()
    if len(blob) < 36 or blob[:4] != OSVX_MAGIC:
        raise DataError(f"voxel file {path}: bad magic")
    version, dx, dy, dz = struct.unpack_from("<IIII", blob, 4)
    if version != 1 or (dx, dy, dz) != VOXEL_DIMS:
        raise DataError(f"voxel file {path}: unsupported version/dims {(version, dx, dy, dz)}")
    (size,) = struct.unpack_from("<f", blob, 20)
    origin = np.frombuffer(blob, dtype="<f4", count=3, offset=24).astype(np.float64)
    n_cells = dx * dy * dz
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, offset=36))
    if len(bits) < n_cells:
        raise DataError(f"voxel file {path}: truncated occupancy block")
    occ = bits[:n_cells].astype(bool).reshape(VOXEL_DIMS)
    return VoxelGrid(occ, float(size), origin)


# --- patch export ---------------------------------------------------------------------

def save_patch_crops(patches: list[tuple[int, int, ImagePatch]], images: dict[int, np.ndarray],
                     out_dir) -> Path:
    """Write PNG crops named scan{id}_seg{id}.png plus a CSV index.

    `images` maps image id -> HxW or HxWx3 uint8 array (the image paired with a scan).
    Returns the index path.
    """
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = out / "patch_index.csv"
    with open(index, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["scan_id", "segment_id", "file",
                        "u_min", "v_min", "u_max", "v_max", "visible_fraction"])
        for scan_id, seg_id, patch in patches:
            img = images[patch.image_id]
            u0, v0, u1, v1 = patch.pixel_bbox
            crop = img[v0:v1, u0:u1]
            name = f"scan{scan_id}_seg{seg_id}.png"
            Image.fromarray(crop).save(out / name)
            writer.writerow([scan_id, seg_id, name, u0, v0, u1, v1,
                             f"{patch.visible_fraction:.6f}"])
    return index


# --- backend selection ----------------------------------------------------------------

class DescriptorBackend:
    """Turns segments into descriptor vectors; selected by pipeline configuration."""

    name = "base"
    dim: int

    def describe(self, seg: Segment) -> Optional[np.ndarray]:
        raise NotImplementedError


class HandcraftedBackend(DescriptorBackend):
    name = "handcrafted"
    dim = HANDCRAFTED_DIM

    def describe(self, seg: Segment) -> Optional[np.ndarray]:
        if len(seg.points) < 4:
            return None
        try:
            return describe_handcrafted(seg)
        except DegenerateGeometry:
            return None


class EmbeddingFileBackend(DescriptorBackend):
    """Looks descriptors up in a trained-embedding file; unknown segments get None."""

    name = "embedding-file"

    def __init__(self, path):
        self.embeddings = load_embeddings(path)
        if not self.embeddings:
            raise DataError(f"embedding file {path} holds no records")
        self.dim = len(next(iter(self.embeddings.values())))

    def describe(self, seg: Segment) -> Optional[np.ndarray]:
        vec = self.embeddings.get((seg.scan_id, seg.id))
        return None if vec is None else vec.astype(np.float64)


def make_backend(name: str, embedding_path=None) -> DescriptorBackend:
    if name == "handcrafted":
        return HandcraftedBackend()
    if name == "embedding-file":
        if embedding_path is None:
            raise ConfigError("embedding-file backend needs descriptor.embedding_path")
        return EmbeddingFileBackend(embedding_path)
    raise ConfigError(f"unknown descriptor backend {name!r}")
