"""Interchange file formats shared with the localization pipeline.

The trainer talks to the pipeline exclusively through files: it reads the
exported voxel grids (OSVX), group assignments, correspondence labels, and
patch crops, and it writes embedding files (OSEM) the pipeline loads as a
descriptor backend. The byte layouts here mirror the pipeline's definitions.

OSEM: b"OSEM", <IIQ> (version=1, dim, count), then count records of
      <II> (scan_id, segment_id) + dim little-endian float32 values,
      sorted by key; duplicate keys are invalid.
OSVX: b"OSVX", <IIII> (version=1, 32, 32, 16), <f> voxel size, 3 float32
      origin, then the 32x32x16 occupancy flattened C-order and bit-packed
      (most significant bit first).
"""

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

OSEM_MAGIC = b"OSEM"
OSVX_MAGIC = b"OSVX"
VOXEL_DIMS = (32, 32, 16)


def save_embeddings(embeddings: dict[tuple[int, int], np.ndarray], path) -> None:
    if not embeddings:
        raise DataError("refusing to write an empty embedding file")
    dims = {len(np.ravel(v)) for v in embeddings.values()}
    if len(dims) != 1:
        raise DataError(f"embeddings have mixed dims {sorted(dims)}")
    dim = dims.pop()
    with open(path, "wb") as f:
        f.write(OSEM_MAGIC)
        f.write(struct.pack("<IIQ", 1, dim, len(embeddings)))
        for (scan_id, seg_id), vec in sorted(embeddings.items()):
            f.write(struct.pack("<II", scan_id, seg_id))
            f.write(np.asarray(vec, dtype="<f4").tobytes())


def load_embeddings(path) -> dict[tuple[int, int], np.ndarray]:
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
    if len(body) != record * count:
        raise DataError(f"embedding file {path}: expected {record * count} "
                        f"body bytes, found {len(body)}")
    out: dict[tuple[int, int], np.ndarray] = {}
    for i in range(count):
        off = i * record
        scan_id, seg_id = struct.unpack_from("<II", body, off)
        key = (scan_id, seg_id)
        if key in out:
            raise DataError(f"embedding file {path}: duplicate key {key}")
        out[key] = np.frombuffer(body, dtype="<f4", count=dim, offset=off + 8).copy()
    return out


@dataclass(frozen=True)
class VoxelData:
    occupancy: np.ndarray  # (32, 32, 16) bool
    voxel_size: float
    origin: np.ndarray     # (3,) float64


def load_voxel_grid(path) -> VoxelData:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read voxel file {path}: {e}") from e
    if len(blob) < 36 or blob[:4] != OSVX_MAGIC:
        raise DataError(f"voxel file {path}: bad magic")
    version, dx, dy, dz = struct.unpack_from("<IIII", blob, 4)
    if version != 1 or (dx, dy, dz) != VOXEL_DIMS:
        raise DataError(f"voxel file {path}: unsupported version/dims "
                        f"{(version, dx, dy, dz)}")
    (size,) = struct.unpack_from("<f", blob, 20)
    origin = np.frombuffer(blob, dtype="<f4", count=3, offset=24).astype(np.float64)
    n_cells = dx * dy * dz
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, offset=36))
    if len(bits) < n_cells:
        raise DataError(f"voxel file {path}: truncated occupancy block")
    occ = bits[:n_cells].astype(bool).reshape(VOXEL_DIMS)
    return VoxelData(occ, float(size), origin)


def save_voxel_grid(data: VoxelData, path) -> None:
    occ = np.asarray(data.occupancy, dtype=bool)
    if occ.shape != VOXEL_DIMS:
        raise DataError(f"occupancy must be {VOXEL_DIMS}, got {occ.shape}")
    with open(path, "wb") as f:
        f.write(OSVX_MAGIC)
        f.write(struct.pack("<IIII", 1, *VOXEL_DIMS))
        f.write(struct.pack("<f", data.voxel_size))
        f.write(np.asarray(data.origin, dtype="<f4").tobytes())
        f.write(np.packbits(occ.reshape(-1).astype(np.uint8)).tobytes())


def load_groups_csv(path) -> dict[tuple[int, int], int]:
    """groups.csv rows (scan_id, segment_id, group_id) -> key to group map."""
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise DataError(f"cannot read groups file {path}: {e}") from e
    if not rows:
        raise DataError(f"groups file {path} holds no rows")
    out = {}
    for row in rows:
        try:
            key = (int(row["scan_id"]), int(row["segment_id"]))
            out[key] = int(row["group_id"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"groups file {path}: malformed row {row}") from e
    return out


def load_labels_csv(path) -> list[dict]:
    """labels.csv rows with typed fields (ints, float iou, bool is_match)."""
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise DataError(f"cannot read labels file {path}: {e}") from e
    out = []
    for row in rows:
        try:
            out.append({
                "scan_a": int(row["scan_a"]), "segment_a": int(row["segment_a"]),
                "scan_b": int(row["scan_b"]), "segment_b": int(row["segment_b"]),
                "iou": float(row["iou"]), "is_match": row["is_match"] == "1",
            })
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"labels file {path}: malformed row {row}") from e
    return out


def load_patch_index(path) -> dict[tuple[int, int], dict]:
    """The patch crop index written next to the PNG crops."""
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise DataError(f"cannot read patch index {path}: {e}") from e
    out = {}
    for row in rows:
        try:
            key = (int(row["scan_id"]), int(row["segment_id"]))
            out[key] = {"file": row["file"],
                        "visible_fraction": float(row["visible_fraction"])}
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"patch index {path}: malformed row {row}") from e
    return out
