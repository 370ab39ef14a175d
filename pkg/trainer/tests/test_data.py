"""Toy shape corpus, export-directory loading, and the P x K batch sampler."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segtrainer.data import (BOX_CLASSES, TrainingSample, TripletBatcher,
                             _box_surface, _cylinder_surface, load_export_dir,
                             make_toy_dataset, split_holdout, voxelize_points)
from segtrainer.errors import ConfigError, DataError
from segtrainer.formats import VOXEL_DIMS, VoxelData, save_voxel_grid


def voxel_iou(a, b):
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return inter / union if union else 1.0


class TestSurfaceSampling:
    def test_box_points_on_surface(self):
        rng = np.random.default_rng(0)
        dims = (2.0, 1.0, 0.5)
        pts = _box_surface(rng, dims, 500)
        half = np.array(dims) / 2
        assert np.all(np.abs(pts) <= half + 1e-9)
        on_face = np.isclose(np.abs(pts), half, atol=1e-9)
        assert np.all(on_face.any(axis=1))

    def test_cylinder_points_on_surface(self):
        rng = np.random.default_rng(1)
        pts = _cylinder_surface(rng, 0.8, 2.0, 500)
        r = np.hypot(pts[:, 0], pts[:, 1])
        assert np.all(r <= 0.8 + 1e-9)
        assert np.all(np.abs(pts[:, 2]) <= 1.0 + 1e-9)
        lateral = np.isclose(r, 0.8, atol=1e-9)
        caps = np.isclose(np.abs(pts[:, 2]), 1.0, atol=1e-9)
        assert np.all(lateral | caps)


class TestVoxelize:
    def test_shape_and_occupancy(self):
        rng = np.random.default_rng(2)
        occ = voxelize_points(_box_surface(rng, BOX_CLASSES[0], 400))
        assert occ.shape == VOXEL_DIMS and occ.dtype == bool
        assert occ.any()

    def test_yaw_rotation_mostly_cancelled(self):
        # The horizontal-eigenvector alignment should make a rotated copy of an
        # elongated shape land on nearly the same cells.
        rng = np.random.default_rng(3)
        pts = _box_surface(rng, (2.6, 0.9, 1.3), 1500)
        c, s = np.cos(1.1), np.sin(1.1)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        assert voxel_iou(voxelize_points(pts), voxelize_points(pts @ rot.T)) > 0.7

    def test_translation_invariant(self):
        rng = np.random.default_rng(4)
        pts = _box_surface(rng, (1.5, 0.7, 1.1), 800)
        moved = pts + np.array([40.0, -12.0, 3.0])
        assert np.array_equal(voxelize_points(pts), voxelize_points(moved))

    def test_single_point_does_not_crash(self):
        occ = voxelize_points(np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]))
        assert occ.sum() >= 1


class TestToyDataset:
    def test_sizes_and_groups(self):
        samples = make_toy_dataset(0, n_classes=5, per_class=4)
        assert len(samples) == 20
        assert len({s.key for s in samples}) == 20
        groups = {}
        for s in samples:
            groups.setdefault(s.group, 0)
            groups[s.group] += 1
        assert groups == {c: 4 for c in range(5)}
        assert all(s.voxels.shape == VOXEL_DIMS for s in samples)
        assert all(s.voxels.any() for s in samples)

    def test_deterministic_per_seed(self):
        a = make_toy_dataset(7, n_classes=3, per_class=3)
        b = make_toy_dataset(7, n_classes=3, per_class=3)
        c = make_toy_dataset(8, n_classes=3, per_class=3)
        assert all(np.array_equal(x.voxels, y.voxels) for x, y in zip(a, b))
        assert any(not np.array_equal(x.voxels, y.voxels) for x, y in zip(a, c))

    def test_covers_boxes_and_cylinders(self):
        samples = make_toy_dataset(0, n_classes=20, per_class=2)
        assert {s.group for s in samples} == set(range(20))

    def test_too_many_classes_rejected(self):
        with pytest.raises(ConfigError, match="at most 20"):
            make_toy_dataset(0, n_classes=21, per_class=2)


class TestSplitHoldout:
    def test_disjoint_and_counted(self):
        samples = make_toy_dataset(1, n_classes=4, per_class=6)
        train, test = split_holdout(samples, 2)
        assert len(train) == 16 and len(test) == 8
        assert {s.key for s in train}.isdisjoint({s.key for s in test})
        for group in range(4):
            assert sum(1 for s in test if s.group == group) == 2

    def test_deterministic(self):
        samples = make_toy_dataset(1, n_classes=3, per_class=5)
        t1 = split_holdout(samples, 1)[1]
        t2 = split_holdout(list(reversed(samples)), 1)[1]
        assert [s.key for s in t1] == [s.key for s in t2]

    def test_group_too_small_rejected(self):
        samples = make_toy_dataset(1, n_classes=2, per_class=3)
        with pytest.raises(DataError, match="cannot hold out"):
            split_holdout(samples, 3)


def flat_samples(group_sizes):
    samples = []
    for g, n in enumerate(group_sizes):
        for i in range(n):
            samples.append(TrainingSample((g, i), np.ones(VOXEL_DIMS, bool), g))
    return samples


class TestTripletBatcher:
    def test_batch_composition(self):
        samples = flat_samples([5, 5, 5, 2])
        b = TripletBatcher(samples, p=3, k=3, rng=np.random.default_rng(0))
        idx = b.next_indices()
        assert len(idx) == 9 and len(set(idx)) == 9
        groups = [samples[i].group for i in idx]
        assert len(set(groups)) == 3
        assert 3 not in groups  # the 2-member group cannot supply k=3

    def test_p_shrinks_to_eligible_groups(self):
        b = TripletBatcher(flat_samples([4, 4]), p=8, k=2,
                           rng=np.random.default_rng(0))
        assert b.p == 2
        assert len(b.next_indices()) == 4

    def test_small_p_or_k_rejected(self):
        samples = flat_samples([4, 4])
        with pytest.raises(ConfigError, match="P >= 2"):
            TripletBatcher(samples, p=1, k=2, rng=np.random.default_rng(0))
        with pytest.raises(ConfigError, match="K >= 2"):
            TripletBatcher(samples, p=2, k=1, rng=np.random.default_rng(0))

    def test_insufficient_groups_rejected(self):
        with pytest.raises(DataError, match="insufficient groups"):
            TripletBatcher(flat_samples([5, 1, 1]), p=2, k=2,
                           rng=np.random.default_rng(0))

    def test_deterministic_given_rng(self):
        samples = flat_samples([6, 6, 6])
        a = TripletBatcher(samples, 2, 3, np.random.default_rng(42))
        b = TripletBatcher(samples, 2, 3, np.random.default_rng(42))
        assert [a.next_indices() for _ in range(5)] == [
            b.next_indices() for _ in range(5)]

    @given(seed=st.integers(0, 1000), p=st.integers(2, 5), k=st.integers(2, 4))
    @settings(max_examples=40, deadline=None)
    def test_every_batch_is_p_groups_of_k(self, seed, p, k):
        rng = np.random.default_rng(seed)
        sizes = rng.integers(1, 8, size=6)
        eligible = sum(1 for n in sizes if n >= k)
        if eligible < 2:
            with pytest.raises(DataError):
                TripletBatcher(flat_samples(sizes), p, k, rng)
            return
        b = TripletBatcher(flat_samples(sizes), p, k, rng)
        idx = b.next_indices()
        per_group = {}
        for i in idx:
            per_group.setdefault(b.samples[i].group, set()).add(i)
        assert len(per_group) == min(p, eligible)
        assert all(len(v) == k for v in per_group.values())


class TestLoadExportDir:
    def make_export(self, root, keys, with_patch_for=()):
        voxels = root / "voxels"
        voxels.mkdir(parents=True)
        lines = ["scan_id,segment_id,group_id"]
        rng = np.random.default_rng(0)
        for n, (scan, seg) in enumerate(keys):
            lines.append(f"{scan},{seg},{n % 2}")
            occ = rng.random(VOXEL_DIMS) < 0.2
            save_voxel_grid(VoxelData(occ, 0.1, np.zeros(3)),
                            voxels / f"scan{scan}_seg{seg}.osvx")
        (root / "groups.csv").write_text("\n".join(lines) + "\n")
        if with_patch_for:
            from PIL import Image
            patches = root / "patches"
            patches.mkdir()
            rows = ["scan_id,segment_id,file,u_min,v_min,u_max,v_max,"
                    "visible_fraction"]
            for scan, seg in with_patch_for:
                name = f"patch{scan}_{seg}.png"
                Image.new("L", (31, 17), color=128).save(patches / name)
                rows.append(f"{scan},{seg},{name},0,0,30,16,1.0")
            (patches / "patch_index.csv").write_text("\n".join(rows) + "\n")

    def test_loads_sorted_samples(self, tmp_path):
        self.make_export(tmp_path, [(1, 0), (0, 2), (0, 1)])
        samples = load_export_dir(tmp_path)
        assert [s.key for s in samples] == [(0, 1), (0, 2), (1, 0)]
        assert all(s.voxels.shape == VOXEL_DIMS for s in samples)
        assert all(s.patch is None for s in samples)

    def test_missing_voxel_file_rejected(self, tmp_path):
        self.make_export(tmp_path, [(0, 0), (0, 1)])
        (tmp_path / "voxels" / "scan0_seg1.osvx").unlink()
        with pytest.raises(DataError, match="missing voxel file"):
            load_export_dir(tmp_path)

    def test_patches_resized_and_scaled(self, tmp_path):
        self.make_export(tmp_path, [(0, 0), (2, 5)], with_patch_for=[(2, 5)])
        samples = load_export_dir(tmp_path, with_patches=True)
        by_key = {s.key: s for s in samples}
        patch = by_key[(2, 5)].patch
        assert patch.shape == (140, 140) and patch.dtype == np.float32
        assert np.all((patch >= 0.0) & (patch <= 1.0))
        assert by_key[(0, 0)].patch is None

    def test_patches_ignored_without_flag(self, tmp_path):
        self.make_export(tmp_path, [(0, 0), (1, 1)], with_patch_for=[(0, 0)])
        samples = load_export_dir(tmp_path)
        assert all(s.patch is None for s in samples)
