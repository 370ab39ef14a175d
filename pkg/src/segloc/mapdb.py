"""The localization map: world-frame segments with descriptors and k-NN retrieval."""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .kdtree import KDTree
from .segmentation import Segment

OSLM_MAGIC = b"OSLM"
OSLM_VERSION = 1


@dataclass(frozen=True)
class MatchCandidate:
    query_segment_id: int
    map_segment_id: int
    descriptor_distance: float
    query_centroid: np.ndarray
    map_centroid: np.ndarray


@dataclass
class MapMetadata:
    backend: str
    dim: int
    created_unix: int = field(default_factory=lambda: int(time.time()))
    has_points: bool = True


class SegmentMap:
    """Immutable after construction; concurrent queries need no locking."""

    def __init__(self, segments: list[Segment], descriptors: np.ndarray,
                 metadata: MapMetadata):
        if len(segments) == 0:
            raise ValueError("a map needs at least one segment")
        descriptors = np.asarray(descriptors, dtype=np.float64)
        if descriptors.ndim != 2 or len(descriptors) != len(segments):
            raise ValueError("need one descriptor row per segment")
        if descriptors.shape[1] != metadata.dim:
            raise ValueError(
                f"descriptor dim {descriptors.shape[1]} does not match metadata dim {metadata.dim}"
            )
        self.segments = segments
        self.descriptors = descriptors
        self.metadata = metadata
        self.centroids = np.stack([s.centroid for s in segments])
        self.index = KDTree(descriptors)

    def __len__(self) -> int:
        return len(self.segments)

    def knn(self, query_descriptor: np.ndarray, k: int,
            query_segment_id: int = -1,
            query_centroid: Optional[np.ndarray] = None) -> list[MatchCandidate]:
        """min(k, N) nearest map segments in descriptor space, ascending distance."""
        q = np.asarray(query_descriptor, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.metadata.dim:
            raise ValueError(f"query dim {q.shape[0]} != map dim {self.metadata.dim}")
        if k < 1:
            raise ValueError("k must be >= 1")
        idx, dist = self.index.query(q, k)
        qc = np.zeros(3) if query_centroid is None else np.asarray(query_centroid, dtype=np.float64)
        return [
            MatchCandidate(
                query_segment_id=query_segment_id,
                map_segment_id=self.segments[i].id,
                descriptor_distance=float(d),
                query_centroid=qc,
                map_centroid=self.segments[i].centroid,
            )
            for i, d in zip(idx, dist)
        ]


def build_map(segments: list[Segment], descriptors, metadata: MapMetadata) -> SegmentMap:
    """Canonicalize and index segments into an immutable map.

    Points pass through float32 so that in-memory geometry is bit-identical to what
    save/load preserves; centroids are recomputed from the canonical points.
    """
    dims = {np.asarray(d).shape[-1] for d in descriptors}
    if len(dims) != 1:
        raise ValueError(f"mixed descriptor dims {sorted(dims)}")
    # store in ascending id order so index-order tie-breaks equal id-order ones
    order = sorted(range(len(segments)), key=lambda i: segments[i].id)
    canonical = []
    for i in order:
        seg = segments[i]
        pts = seg.points.astype(np.float32).astype(np.float64)
        canonical.append(Segment(seg.id, pts, pts.mean(axis=0), seg.scan_id, "world"))
    desc = np.stack([np.asarray(descriptors[i], dtype=np.float64).reshape(-1) for i in order])
    desc = desc.astype(np.float32).astype(np.float64)  # descriptors persist as float32
    return SegmentMap(canonical, desc, metadata)


def _pack_metadata(meta: MapMetadata, scan_ids: list[int], n_segments: int) -> bytes:
    backend = meta.backend.encode("utf-8")
    out = struct.pack("<IHB", meta.dim, len(backend), 1 if meta.has_points else 0)
    out += backend
    out += struct.pack("<QI", meta.created_unix, n_segments)
    out += np.asarray(scan_ids, dtype="<u4").tobytes()
    return out


def save_map(m: SegmentMap, path, include_points: bool = True) -> None:
    """Serialize in the OSLM layout with a trailing CRC32 over all preceding bytes."""
    buf = bytearray()
    buf += OSLM_MAGIC
    buf += struct.pack("<I", OSLM_VERSION)
    meta = MapMetadata(m.metadata.backend, m.metadata.dim, m.metadata.created_unix,
                       has_points=include_points)
    buf += _pack_metadata(meta, [s.scan_id for s in m.segments], len(m))
    for seg, desc in zip(m.segments, m.descriptors):
        buf += struct.pack("<I", seg.id)
        buf += np.asarray(seg.centroid, dtype="<f8").tobytes()
        n = len(seg.points) if include_points else 0
        buf += struct.pack("<I", n)
        if include_points:
            buf += seg.points.astype("<f4").tobytes()
        buf += desc.astype("<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise DataError(f"map file {self.path}: truncated (needed {n} bytes at {self.off})")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_map(path) -> SegmentMap:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read map file {path}: {e}") from e
    if len(blob) < 12 or blob[:4] != OSLM_MAGIC:
        raise DataError(f"map file {path}: bad magic")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise DataError(f"map file {path}: checksum failure")
    r = _Reader(blob[:-4], path)
    r.take(4)  # magic
    (version,) = r.unpack("<I")
    if version != OSLM_VERSION:
        raise DataError(f"map file {path}: unsupported version {version}")
    dim, backend_len, has_points = r.unpack("<IHB")
    backend = r.take(backend_len).decode("utf-8")
    created, count = r.unpack("<QI")
    scan_ids = np.frombuffer(r.take(4 * count), dtype="<u4")
    segments: list[Segment] = []
    descriptors = np.empty((count, dim))
    for i in range(count):
        (seg_id,) = r.unpack("<I")
        centroid = np.frombuffer(r.take(24), dtype="<f8").astype(np.float64)
        (n_pts,) = r.unpack("<I")
        pts = np.frombuffer(r.take(12 * n_pts), dtype="<f4").astype(np.float64).reshape(-1, 3)
        descriptors[i] = np.frombuffer(r.take(4 * dim), dtype="<f4").astype(np.float64)
        segments.append(Segment(seg_id, pts, centroid, int(scan_ids[i]), "world"))
    if r.off != len(r.blob):
        raise DataError(f"map file {path}: {len(r.blob) - r.off} trailing bytes")
    meta = MapMetadata(backend, dim, created, has_points=bool(has_points))
    return SegmentMap(segments, descriptors, meta)
