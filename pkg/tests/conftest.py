"""Shared fixtures: a hand-built two-box scene with per-point labels, and the frozen
synthetic localization run used by the end-to-end and metric tests."""

import time

import numpy as np
import pytest

from segloc.geometry import SE3, rot_z
from segloc.pipeline import (MatchingConfig, PipelineConfig, build_map_from_trajectory,
                             localize_scan)
from segloc.synthetic import Box, SyntheticWorld, make_world, path_poses, simulate_scan
from segloc.verification import VerificationConfig


def facing_box(dist: float, bearing: float, size) -> Box:
    """A box at the given range/bearing, rotated to show the sensor one flat face."""
    size = np.asarray(size, dtype=np.float64)
    center = np.array([dist * np.cos(bearing), dist * np.sin(bearing), size[2] / 2])
    return Box(SE3(rot_z(bearing), center), size)


SENSOR_POSE = SE3(np.eye(3), np.array([0.0, 0.0, 1.5]))


@pytest.fixture
def two_box_scene():
    """Two clean boxes close to the sensor: every wall sample is unambiguous, so
    segmentation can recover the simulator labels exactly."""
    world = SyntheticWorld([
        facing_box(3.0, 0.55, (2.0, 2.0, 2.6)),
        facing_box(3.2, -0.55, (2.0, 1.6, 2.6)),
    ])
    scan, labels = simulate_scan(world, SENSOR_POSE, PipelineConfig().intrinsics,
                                 scan_id=0, return_labels=True)
    return world, scan, labels


# Frozen end-to-end recipe: a 30-object world scanned from 20 poses along a diagonal
# path, queried from 50 held-out jittered poses with 5 cm range noise.
WORLD_SEED = 4
WORLD_EXTENT = 40.0
N_MAP_POSES = 20
N_QUERIES = 50
QUERY_NOISE = 0.05


def run_config() -> PipelineConfig:
    # min_clique_size 6 instead of the default 4: at 16-beam sparsity the handcrafted
    # descriptor occasionally admits a 4-to-5 strong consistent-but-wrong constellation,
    # and demanding more mutual support removes those without losing true positives.
    return PipelineConfig(matching=MatchingConfig(k=5),
                          verification=VerificationConfig(min_clique_size=6))


def query_poses(rng: np.random.Generator, n: int, half: float) -> list[SE3]:
    poses = []
    for i in range(n):
        a = 0.05 + 0.9 * i / (n - 1)
        xy = np.array([-half, -half]) + a * np.array([2 * half, 2 * half])
        xy = xy + rng.normal(0.0, 0.3, 2)
        yaw = np.pi / 4 + rng.normal(0.0, 0.2)
        poses.append(SE3(rot_z(yaw), np.array([xy[0], xy[1], 1.5])))
    return poses


@pytest.fixture(scope="session")
def synthetic_run():
    cfg = run_config()
    world = make_world(seed=WORLD_SEED, n_objects=30, extent=WORLD_EXTENT)
    half = 0.35 * WORLD_EXTENT
    map_poses = path_poses((-half, -half), (half, half), N_MAP_POSES, seed=WORLD_SEED)
    map_scans = [simulate_scan(world, p, cfg.intrinsics, scan_id=i)
                 for i, p in enumerate(map_poses)]
    pose_lookup = {i: p for i, p in enumerate(map_poses)}
    smap = build_map_from_trajectory(map_scans, pose_lookup, cfg)

    rng = np.random.default_rng(7)
    queries = []
    times = []
    for i, qp in enumerate(query_poses(rng, N_QUERIES, half)):
        scan = simulate_scan(world, qp, cfg.intrinsics, noise_sigma=QUERY_NOISE,
                             seed=500 + i, scan_id=i)
        t0 = time.perf_counter()
        res = localize_scan(smap, scan, cfg)
        times.append(time.perf_counter() - t0)
        queries.append((scan, qp, res))
    return {
        "config": cfg,
        "world": world,
        "map_scans": map_scans,
        "map_poses": pose_lookup,
        "smap": smap,
        "queries": queries,
        "times": times,
    }
