"""Tests for segment descriptors, voxelization, image patches, and artifact files."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segloc.descriptors import (
    HANDCRAFTED_DIM,
    VOXEL_DIMS,
    EmbeddingFileBackend,
    HandcraftedBackend,
    ImagePatch,
    VoxelGrid,
    describe_handcrafted,
    extract_patch,
    load_embeddings,
    load_voxel_grid,
    make_backend,
    save_embeddings,
    save_patch_crops,
    save_voxel_grid,
    voxelize,
)
from segloc.errors import ConfigError, DataError, DegenerateGeometry
from segloc.geometry import PinholeCamera, SE3, rot_z
from segloc.segmentation import make_segment


def random_blob(seed: int, n: int = 200) -> np.ndarray:
    """Anisotropic gaussian blob with well-separated covariance eigenvalues."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, 3)) * np.array([3.0, 1.7, 0.6])


def dyadic_points(seed: int, n: int = 16) -> np.ndarray:
    """Points on a 1/64 lattice; arithmetic on them (and shifts by small
    dyadic rationals) is exact in binary floating point."""
    rng = np.random.default_rng(seed)
    return rng.integers(-2000, 2000, size=(n, 3)).astype(np.float64) / 64.0


class TestHandcrafted:
    def test_dimension_and_finiteness(self):
        d = describe_handcrafted(make_segment(0, random_blob(0), 0))
        assert d.shape == (HANDCRAFTED_DIM,)
        assert np.all(np.isfinite(d))

    def test_collinear_points(self):
        # rank-1 covariance: one nonzero eigenvalue
        pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
        d = describe_handcrafted(make_segment(0, pts, 0))
        assert d[0] == pytest.approx(1.0, abs=1e-9)   # linearity
        assert d[1] == pytest.approx(0.0, abs=1e-9)   # planarity
        assert d[2] == pytest.approx(0.0, abs=1e-9)   # sphericity

    def test_coplanar_square_corners(self):
        # centered corners (+-0.5, +-0.5, 0) give covariance diag(1/4, 1/4, 0),
        # so the two in-plane eigenvalues are equal and the vertical one is zero
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
        d = describe_handcrafted(make_segment(0, pts, 0))
        assert d[1] == pytest.approx(1.0, abs=1e-9)   # planarity (e2-e3)/e1
        assert d[0] == pytest.approx(0.0, abs=1e-9)   # linearity, since e1 = e2

    def test_translation_by_five_is_identical(self):
        pts = dyadic_points(3)
        a = describe_handcrafted(make_segment(0, pts, 0))
        b = describe_handcrafted(make_segment(0, pts + np.array([5.0, 5.0, 5.0]), 0))
        assert np.array_equal(a, b)

    def test_too_few_points(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
        with pytest.raises(DegenerateGeometry):
            describe_handcrafted(make_segment(0, pts, 0))

    def test_identical_points_degenerate(self):
        pts = np.ones((8, 3))
        with pytest.raises(DegenerateGeometry):
            describe_handcrafted(make_segment(0, pts, 0))

    def test_height_histogram_block(self):
        d = describe_handcrafted(make_segment(0, random_blob(5), 0))
        hist = d[11:21]
        assert hist.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(hist >= 0.0)

    def test_flat_segment_histogram(self):
        # zero z-extent: all mass lands in the first bin by convention
        rng = np.random.default_rng(6)
        pts = np.column_stack([rng.standard_normal(30), rng.standard_normal(30),
                               np.full(30, 1.25)])
        d = describe_handcrafted(make_segment(0, pts, 0))
        assert d[11] == pytest.approx(1.0)
        assert np.all(d[12:21] == 0.0)

    def test_point_count_feature(self):
        pts = random_blob(7, n=137)
        d = describe_handcrafted(make_segment(0, pts, 0))
        assert d[10] == pytest.approx(np.log1p(137))

    def test_extents_sorted_descending(self):
        d = describe_handcrafted(make_segment(0, random_blob(8), 0))
        ext = d[7:10]
        assert ext[0] >= ext[1] >= ext[2] >= 0.0

    @given(seed=st.integers(0, 10_000), n=st.integers(4, 300))
    @settings(max_examples=40, deadline=None)
    def test_feature_ranges(self, seed, n):
        d = describe_handcrafted(make_segment(0, random_blob(seed, n=n), 0))
        lin, plan, sph, omni, aniso, entropy, curv = d[:7]
        eps = 1e-9
        for v in (lin, plan, sph, aniso):
            assert -eps <= v <= 1.0 + eps
        assert 0.0 < omni <= 1.0 + eps
        assert -eps <= entropy <= np.log(3.0) + eps
        assert -eps <= curv <= 1.0 / 3.0 + eps

    @given(seed=st.integers(0, 10_000),
           yaw=st.floats(0.0, 2 * np.pi, allow_nan=False))
    @settings(max_examples=40, deadline=None)
    def test_yaw_invariance(self, seed, yaw):
        pts = random_blob(seed)
        seg_a = make_segment(0, pts, 0)
        seg_b = make_segment(0, pts @ rot_z(yaw).T, 0)
        a = describe_handcrafted(seg_a)
        b = describe_handcrafted(seg_b)
        np.testing.assert_allclose(a, b, atol=1e-6)

    @given(seed=st.integers(0, 10_000),
           tx=st.integers(-160, 160), ty=st.integers(-160, 160),
           tz=st.integers(-160, 160))
    @settings(max_examples=40, deadline=None)
    def test_dyadic_translation_exact(self, seed, tx, ty, tz):
        pts = dyadic_points(seed)
        t = np.array([tx, ty, tz], dtype=np.float64) / 4.0
        a = describe_handcrafted(make_segment(0, pts, 0))
        b = describe_handcrafted(make_segment(0, pts + t, 0))
        assert np.array_equal(a, b)

    @given(seed=st.integers(0, 10_000),
           tx=st.floats(-100, 100, allow_nan=False),
           ty=st.floats(-100, 100, allow_nan=False),
           tz=st.floats(-100, 100, allow_nan=False))
    @settings(max_examples=40, deadline=None)
    def test_float_translation_near_exact(self, seed, tx, ty, tz):
        # the shape features and extents are stable under arbitrary float shifts;
        # the histogram is excluded because a point sitting exactly on a bin
        # boundary may legitimately hop bins under one-ulp input changes
        pts = random_blob(seed)
        a = describe_handcrafted(make_segment(0, pts, 0))
        b = describe_handcrafted(make_segment(0, pts + np.array([tx, ty, tz]), 0))
        np.testing.assert_allclose(a[:11], b[:11], atol=1e-9)


def box_surface_distance(p: np.ndarray, half: np.ndarray) -> float:
    """Distance from a point to the surface of an origin-centered axis-aligned box."""
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0))
    inside = min(q.max(), 0.0)
    return abs(outside + inside)


class TestVoxelize:
    def test_single_point(self):
        g = voxelize(make_segment(0, np.array([[1.0, 2.0, 3.0]]), 0))
        assert g.occupancy.sum() == 1
        assert g.voxel_size > 0

    def test_empty_segment(self):
        from segloc.segmentation import Segment

        empty = Segment(0, np.zeros((0, 3)), np.zeros(3), 0)
        with pytest.raises(DegenerateGeometry):
            voxelize(empty)

    def test_box_shell(self):
        # axis-aligned 3.2 x 3.2 x 1.6 m shell; the x faces are sampled more
        # densely so the horizontal eigenvalues are clearly separated and the
        # aligned frame stays an axis permutation
        ys = np.linspace(-1.6, 1.6, 33)
        zs = np.linspace(-0.8, 0.8, 17)
        xs = np.linspace(-1.6, 1.6, 33)
        face_x = np.array([[sx * 1.6, y, z] for sx in (-1, 1) for y in ys for z in zs])
        face_y = np.array([[x, sy * 1.6, z] for sy in (-1, 1)
                           for x in np.linspace(-1.6, 1.6, 17)
                           for z in np.linspace(-0.8, 0.8, 9)])
        face_z = np.array([[x, y, sz * 0.8] for sz in (-1, 1) for x in xs for y in ys])
        shell = np.vstack([face_x, face_y, face_z])
        g = voxelize(make_segment(0, shell, 0))
        assert g.voxel_size == pytest.approx(0.1, rel=1e-9)
        # hollow interior: no occupied cell off the boundary layers
        assert g.occupancy[1:31, 1:31, 1:15].sum() == 0
        assert g.occupancy.sum() > 1000
        # analytic check: every occupied cell center sits on the shell surface
        # to within half a cell diagonal
        half = np.array([1.6, 1.6, 0.8])
        lo = np.array([-1.6, -1.6, -0.8])
        tol = 0.5 * np.sqrt(3.0) * g.voxel_size + 1e-9
        occ = np.argwhere(g.occupancy)
        centers = lo + (occ + 0.5) * g.voxel_size
        for c in centers:
            assert box_surface_distance(c, half) <= tol

    def test_yaw_rotated_copy_matches(self):
        rng = np.random.default_rng(11)
        blob = rng.standard_normal((400, 3)) * np.array([3.0, 1.7, 0.6])
        blob[:, 0] += 0.002 * blob[:, 0] ** 2  # clear third moment fixes the x sign
        rotated = SE3(rot_z(0.7), np.zeros(3)).apply(blob)
        g1 = voxelize(make_segment(0, blob, 0))
        g2 = voxelize(make_segment(0, rotated, 0))
        assert np.array_equal(g1.occupancy, g2.occupancy)
        assert g1.voxel_size == pytest.approx(g2.voxel_size, rel=1e-12)

    @given(seed=st.integers(0, 10_000), n=st.integers(1, 400))
    @settings(max_examples=40, deadline=None)
    def test_occupied_at_most_point_count(self, seed, n):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-5, 5, size=(n, 3))
        g = voxelize(make_segment(0, pts, 0))
        assert 1 <= g.occupancy.sum() <= n

    def test_grid_shape_enforced(self):
        with pytest.raises(ValueError):
            VoxelGrid(np.zeros((8, 8, 8), dtype=bool), 0.1, np.zeros(3))
        with pytest.raises(ValueError):
            VoxelGrid(np.zeros(VOXEL_DIMS, dtype=bool), -1.0, np.zeros(3))


class TestExtractPatch:
    CAM = PinholeCamera(100.0, 100.0, 50.0, 50.0, 100, 100)

    def test_two_point_bbox(self):
        # (0,0,5) -> (50,50); (1,1,5) -> (70,70); margin inflates by 2 px each way
        seg = make_segment(0, np.array([[0, 0, 5], [1, 1, 5]], dtype=float), 0)
        patch = extract_patch(seg, self.CAM, margin=0.1)
        assert patch is not None
        assert patch.pixel_bbox == (48, 48, 72, 72)
        assert patch.visible_fraction == pytest.approx(1.0)

    def test_all_points_behind(self):
        seg = make_segment(0, np.array([[0, 0, -5], [1, 1, -5]], dtype=float), 0)
        assert extract_patch(seg, self.CAM, margin=0.1) is None

    def test_zero_area_rejected(self):
        seg = make_segment(0, np.array([[0.0, 0.0, 5.0]]), 0)
        assert extract_patch(seg, self.CAM, margin=0.0) is None

    def test_under_half_visible(self):
        pts = np.array([[0, 0, 5], [0, 0, -5], [1, 0, -5]], dtype=float)
        assert extract_patch(make_segment(0, pts, 0), self.CAM, margin=0.1) is None

    def test_clamped_to_image(self):
        # points projecting near the image corners; inflation pushes past the
        # edge and must be clamped back
        pts = np.array([[-2.4, -2.4, 5.0], [2.4, 2.4, 5.0]], dtype=float)
        patch = extract_patch(make_segment(0, pts, 0), self.CAM, margin=0.5)
        assert patch is not None
        u0, v0, u1, v1 = patch.pixel_bbox
        assert u0 == 0 and v0 == 0 and u1 == 100 and v1 == 100

    @given(seed=st.integers(0, 10_000), margin=st.floats(0.0, 1.0))
    @settings(max_examples=60, deadline=None)
    def test_bbox_always_inside_image(self, seed, margin):
        rng = np.random.default_rng(seed)
        cam = PinholeCamera(
            fx=float(rng.uniform(50, 500)), fy=float(rng.uniform(50, 500)),
            cx=float(rng.uniform(100, 540)), cy=float(rng.uniform(80, 400)),
            width=640, height=480,
        )
        pts = rng.uniform(-10, 10, size=(rng.integers(1, 40), 3))
        patch = extract_patch(make_segment(0, pts, 0), cam, margin=float(margin))
        if patch is not None:
            u0, v0, u1, v1 = patch.pixel_bbox
            assert 0 <= u0 < u1 <= cam.width
            assert 0 <= v0 < v1 <= cam.height
            assert 0.5 <= patch.visible_fraction <= 1.0


class TestEmbeddingFile:
    def sample(self):
        rng = np.random.default_rng(0)
        return {
            (0, 0): rng.standard_normal(64).astype(np.float32),
            (0, 3): rng.standard_normal(64).astype(np.float32),
            (2, 1): rng.standard_normal(64).astype(np.float32),
        }

    def test_round_trip_bit_exact(self, tmp_path):
        path = tmp_path / "e.osem"
        emb = self.sample()
        save_embeddings(emb, path)
        back = load_embeddings(path)
        assert set(back) == set(emb)
        for key, vec in emb.items():
            assert back[key].dtype == np.float32
            assert np.array_equal(back[key], vec)

    def test_float64_input_canonicalized(self, tmp_path):
        path = tmp_path / "e.osem"
        vec = np.array([0.1, 0.2, 0.3])
        save_embeddings({(1, 1): vec}, path)
        back = load_embeddings(path)
        assert np.array_equal(back[(1, 1)], vec.astype(np.float32))

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            save_embeddings({}, tmp_path / "e.osem")

    def test_mixed_dims_rejected(self, tmp_path):
        emb = {(0, 0): np.zeros(8, np.float32), (0, 1): np.zeros(9, np.float32)}
        with pytest.raises(ValueError):
            save_embeddings(emb, tmp_path / "e.osem")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.osem"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataError):
            load_embeddings(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "v2.osem"
        path.write_bytes(b"OSEM" + struct.pack("<IIQ", 2, 4, 0))
        with pytest.raises(DataError):
            load_embeddings(path)

    def test_truncated_body(self, tmp_path):
        path = tmp_path / "t.osem"
        save_embeddings(self.sample(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(DataError):
            load_embeddings(path)

    def test_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "dup.osem"
        rec = struct.pack("<II", 4, 4) + np.zeros(2, "<f4").tobytes()
        path.write_bytes(b"OSEM" + struct.pack("<IIQ", 1, 2, 2) + rec + rec)
        with pytest.raises(DataError):
            load_embeddings(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_embeddings(tmp_path / "absent.osem")


class TestVoxelFile:
    def grid(self):
        rng = np.random.default_rng(1)
        occ = rng.random(VOXEL_DIMS) < 0.2
        return VoxelGrid(occ, 0.125, np.array([1.5, -2.25, 0.5]))

    def test_round_trip(self, tmp_path):
        path = tmp_path / "g.osvx"
        g = self.grid()
        save_voxel_grid(g, path)
        back = load_voxel_grid(path)
        assert np.array_equal(back.occupancy, g.occupancy)
        # 0.125 and the origin components are exactly representable in float32
        assert back.voxel_size == g.voxel_size
        assert np.array_equal(back.origin, g.origin)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.osvx"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(DataError):
            load_voxel_grid(path)

    def test_wrong_dims(self, tmp_path):
        path = tmp_path / "d.osvx"
        head = b"OSVX" + struct.pack("<IIII", 1, 16, 16, 16)
        head += struct.pack("<f", 0.1) + np.zeros(3, "<f4").tobytes()
        path.write_bytes(head + b"\x00" * 512)
        with pytest.raises(DataError):
            load_voxel_grid(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.osvx"
        save_voxel_grid(self.grid(), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-100])
        with pytest.raises(DataError):
            load_voxel_grid(path)


class TestPatchCrops:
    def test_written_crops_match_source(self, tmp_path):
        from PIL import Image

        rng = np.random.default_rng(2)
        img = rng.integers(0, 255, size=(120, 160, 3), dtype=np.uint8)
        patch = ImagePatch((10, 20, 40, 60), 0.9, image_id=0)
        index = save_patch_crops([(3, 7, patch)], {0: img}, tmp_path / "out")
        assert index.exists()
        crop = np.asarray(Image.open(tmp_path / "out" / "scan3_seg7.png"))
        assert np.array_equal(crop, img[20:60, 10:40])
        text = index.read_text()
        assert "scan3_seg7.png" in text
        assert "0.900000" in text


class TestBackends:
    def test_handcrafted_backend(self):
        b = make_backend("handcrafted")
        assert isinstance(b, HandcraftedBackend)
        assert b.dim == HANDCRAFTED_DIM
        seg = make_segment(0, random_blob(3), 0)
        assert np.array_equal(b.describe(seg), describe_handcrafted(seg))

    def test_handcrafted_small_segment_none(self):
        b = make_backend("handcrafted")
        seg = make_segment(0, np.zeros((2, 3)), 0)
        assert b.describe(seg) is None

    def test_embedding_backend_lookup(self, tmp_path):
        path = tmp_path / "e.osem"
        vec = np.arange(8, dtype=np.float32)
        save_embeddings({(5, 2): vec}, path)
        b = make_backend("embedding-file", embedding_path=path)
        assert isinstance(b, EmbeddingFileBackend)
        assert b.dim == 8
        hit = b.describe(make_segment(2, np.zeros((4, 3)), scan_id=5))
        assert hit.dtype == np.float64
        assert np.array_equal(hit, vec.astype(np.float64))
        assert b.describe(make_segment(9, np.zeros((4, 3)), scan_id=5)) is None

    def test_embedding_backend_empty_file(self, tmp_path):
        path = tmp_path / "empty.osem"
        path.write_bytes(b"OSEM" + struct.pack("<IIQ", 1, 4, 0))
        with pytest.raises(DataError):
            EmbeddingFileBackend(path)

    def test_unknown_backend(self):
        with pytest.raises(ConfigError):
            make_backend("mystery")

    def test_embedding_backend_needs_path(self):
        with pytest.raises(ConfigError):
            make_backend("embedding-file")
