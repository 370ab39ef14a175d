"""Map database: construction, k-NN retrieval contract, OSLM persistence."""

import struct
import zlib

import numpy as np
import pytest

from segloc.errors import DataError
from segloc.kdtree import linear_knn
from segloc.mapdb import MapMetadata, SegmentMap, build_map, load_map, save_map
from segloc.segmentation import Segment, make_segment


def random_segments(seed: int, n: int, dim: int = 21):
    rng = np.random.default_rng(seed)
    segments = []
    descriptors = []
    for i in range(n):
        pts = rng.uniform(-20, 20, size=(rng.integers(5, 60), 3))
        segments.append(make_segment(i, pts, scan_id=i % 4, frame="world"))
        descriptors.append(rng.standard_normal(dim))
    return segments, descriptors


@pytest.fixture
def small_map():
    segments, descriptors = random_segments(0, 12)
    return build_map(segments, descriptors, MapMetadata("handcrafted", 21))


class TestBuild:
    def test_points_canonicalized_to_float32_values(self):
        segments, descriptors = random_segments(1, 3)
        m = build_map(segments, descriptors, MapMetadata("handcrafted", 21))
        for built, src in zip(m.segments, segments):
            expect = src.points.astype(np.float32).astype(np.float64)
            assert np.array_equal(built.points, expect)
            assert np.array_equal(built.centroid, expect.mean(axis=0))
            assert built.frame == "world"

    def test_descriptors_canonicalized_to_float32_values(self):
        segments, descriptors = random_segments(2, 3)
        m = build_map(segments, descriptors, MapMetadata("handcrafted", 21))
        expect = np.stack(descriptors).astype(np.float32).astype(np.float64)
        assert np.array_equal(m.descriptors, expect)

    def test_segments_sorted_by_id(self):
        segments, descriptors = random_segments(3, 5)
        shuffled = [segments[i] for i in (3, 0, 4, 1, 2)]
        desc_shuffled = [descriptors[i] for i in (3, 0, 4, 1, 2)]
        m = build_map(shuffled, desc_shuffled, MapMetadata("handcrafted", 21))
        assert [s.id for s in m.segments] == [0, 1, 2, 3, 4]
        expect = np.stack(descriptors).astype(np.float32).astype(np.float64)
        assert np.array_equal(m.descriptors, expect)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            build_map([], [], MapMetadata("handcrafted", 21))

    def test_mixed_dims_rejected(self):
        segments, _ = random_segments(4, 2)
        with pytest.raises(ValueError):
            build_map(segments, [np.zeros(8), np.zeros(9)], MapMetadata("x", 8))

    def test_descriptor_count_mismatch(self):
        segments, descriptors = random_segments(5, 3)
        with pytest.raises(ValueError):
            SegmentMap(segments, np.stack(descriptors[:2]), MapMetadata("x", 21))

    def test_metadata_dim_mismatch(self):
        segments, descriptors = random_segments(6, 3)
        with pytest.raises(ValueError):
            SegmentMap(segments, np.stack(descriptors), MapMetadata("x", 22))


class TestKnn:
    def test_single_segment_always_returned(self):
        seg = make_segment(0, np.random.default_rng(0).uniform(size=(5, 3)), 0, "world")
        m = build_map([seg], [np.array([1.0, 2.0])], MapMetadata("x", 2))
        out = m.knn(np.array([100.0, -50.0]), k=3)
        assert len(out) == 1
        assert out[0].map_segment_id == 0

    def test_one_dimensional_example(self):
        # descriptor distances from (0.9, 0): nearest (1,0), then (0,0), then (5,0)
        base, _ = random_segments(7, 3)
        segments = [Segment(10 + i, s.points, s.centroid, s.scan_id, "world")
                    for i, s in enumerate(base)]
        desc = [np.array([0.0, 0.0]), np.array([1.0, 0.0]), np.array([5.0, 0.0])]
        m = build_map(segments, desc, MapMetadata("x", 2))
        out = m.knn(np.array([0.9, 0.0]), k=2, query_segment_id=77)
        assert [c.map_segment_id for c in out] == [11, 10]
        assert out[0].descriptor_distance == pytest.approx(0.1, abs=1e-12)
        assert all(c.query_segment_id == 77 for c in out)

    def test_candidate_fields(self, small_map):
        qc = np.array([1.0, 2.0, 3.0])
        out = small_map.knn(np.zeros(21), k=3, query_segment_id=5, query_centroid=qc)
        for c in out:
            assert c.descriptor_distance >= 0
            assert np.array_equal(c.query_centroid, qc)
            seg = small_map.segments[c.map_segment_id]
            assert np.array_equal(c.map_centroid, seg.centroid)

    def test_matches_linear_oracle(self, small_map):
        rng = np.random.default_rng(8)
        for q in rng.standard_normal((20, 21)):
            out = small_map.knn(q, k=4)
            ref_idx, ref_dist = linear_knn(small_map.descriptors, q, 4)
            assert [c.map_segment_id for c in out] == [small_map.segments[i].id
                                                       for i in ref_idx]
            np.testing.assert_allclose([c.descriptor_distance for c in out],
                                       ref_dist, rtol=1e-12)

    def test_k_exceeds_size(self, small_map):
        out = small_map.knn(np.zeros(21), k=100)
        assert len(out) == len(small_map)

    def test_dim_mismatch(self, small_map):
        with pytest.raises(ValueError):
            small_map.knn(np.zeros(20), k=1)

    def test_bad_k(self, small_map):
        with pytest.raises(ValueError):
            small_map.knn(np.zeros(21), k=0)


class TestPersistence:
    def test_round_trip_bit_exact(self, small_map, tmp_path):
        path = tmp_path / "m.oslm"
        save_map(small_map, path)
        back = load_map(path)
        assert len(back) == len(small_map)
        assert back.metadata.backend == small_map.metadata.backend
        assert back.metadata.dim == small_map.metadata.dim
        assert back.metadata.created_unix == small_map.metadata.created_unix
        assert back.metadata.has_points is True
        assert np.array_equal(back.descriptors, small_map.descriptors)
        for a, b in zip(back.segments, small_map.segments):
            assert a.id == b.id
            assert a.scan_id == b.scan_id
            assert np.array_equal(a.points, b.points)
            assert np.array_equal(a.centroid, b.centroid)

    def test_round_trip_preserves_knn(self, small_map, tmp_path):
        path = tmp_path / "m.oslm"
        save_map(small_map, path)
        back = load_map(path)
        rng = np.random.default_rng(9)
        for q in rng.standard_normal((10, 21)):
            a = small_map.knn(q, k=5)
            b = back.knn(q, k=5)
            assert [c.map_segment_id for c in a] == [c.map_segment_id for c in b]
            assert [c.descriptor_distance for c in a] == [c.descriptor_distance for c in b]

    def test_points_stripped(self, small_map, tmp_path):
        full = tmp_path / "full.oslm"
        lean = tmp_path / "lean.oslm"
        save_map(small_map, full)
        save_map(small_map, lean, include_points=False)
        assert lean.stat().st_size < full.stat().st_size
        back = load_map(lean)
        assert back.metadata.has_points is False
        assert all(len(s.points) == 0 for s in back.segments)
        # centroids and descriptors survive, so retrieval still works
        out = back.knn(np.zeros(21), k=3)
        ref = small_map.knn(np.zeros(21), k=3)
        assert [c.map_segment_id for c in out] == [c.map_segment_id for c in ref]

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_map(tmp_path / "absent.oslm")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.oslm"
        path.write_bytes(b"WXYZ" + b"\x00" * 40)
        with pytest.raises(DataError, match="magic"):
            load_map(path)

    def test_checksum_failure(self, small_map, tmp_path):
        path = tmp_path / "c.oslm"
        save_map(small_map, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="checksum"):
            load_map(path)

    def test_truncated_with_valid_crc(self, small_map, tmp_path):
        # cut mid-record and re-stamp the CRC so the reader, not the checksum,
        # must catch the damage
        path = tmp_path / "t.oslm"
        save_map(small_map, path)
        blob = path.read_bytes()[:-4]
        cut = blob[: len(blob) - 40]
        path.write_bytes(cut + struct.pack("<I", zlib.crc32(cut) & 0xFFFFFFFF))
        with pytest.raises(DataError, match="truncated"):
            load_map(path)

    def test_trailing_bytes_with_valid_crc(self, small_map, tmp_path):
        path = tmp_path / "x.oslm"
        save_map(small_map, path)
        blob = path.read_bytes()[:-4]
        padded = blob + b"\x00" * 8
        path.write_bytes(padded + struct.pack("<I", zlib.crc32(padded) & 0xFFFFFFFF))
        with pytest.raises(DataError, match="trailing"):
            load_map(path)

    def test_version_rejected(self, small_map, tmp_path):
        path = tmp_path / "v.oslm"
        save_map(small_map, path)
        blob = bytearray(path.read_bytes()[:-4])
        blob[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(blob) + struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF))
        with pytest.raises(DataError, match="version"):
            load_map(path)
