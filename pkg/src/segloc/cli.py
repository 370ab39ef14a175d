"""Command-line front end.

Subcommands: build-map, localize, evaluate wakeup, evaluate retrieval,
export-training, synth generate, synth scan. Exit code 0 on success, 2 for
configuration problems, 3 for data problems.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation
from .descriptors import extract_patch, save_patch_crops, save_voxel_grid, voxelize
from .errors import ConfigError, DataError
from .geometry import load_calibration
from .kitti import (Scan, load_scan_directory, read_kitti_poses, read_kitti_scan,
                    vlp16_intrinsics, write_kitti_poses, write_kitti_scan)
from .mapdb import load_map, save_map
from .pipeline import (PipelineConfig, build_map_from_trajectory, load_pipeline_config,
                       localize_scan, result_from_json, result_to_json)
from .segmentation import segment_scan
from .synthetic import load_world, make_world, path_poses, save_world, simulate_scan

log = logging.getLogger("segloc")


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="pipeline TOML config")
    p.add_argument("--seed", type=_u64, default=0, help="random seed")
    p.add_argument("--output", type=Path, default=Path("."), help="output directory")


def _u64(text: str) -> int:
    val = int(text)
    if not (0 <= val < 2**64):
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return val


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segloc",
                                     description="Single-scan LiDAR global localization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-map", help="segment a posed trajectory into a map file")
    _common_flags(p)
    p.set_defaults(func=cmd_build_map)

    p = sub.add_parser("localize", help="localize query scans against a map")
    _common_flags(p)
    p.add_argument("--map", type=Path, required=True, help="map file")
    p.add_argument("--scans", type=Path, required=True, help="query scan directory")
    p.set_defaults(func=cmd_localize)

    ev = sub.add_parser("evaluate", help="metric computations")
    ev_sub = ev.add_subparsers(dest="metric", required=True)

    p = ev_sub.add_parser("wakeup", help="wake-up distance CDF plus recall/precision")
    _common_flags(p)
    p.add_argument("--results", type=Path, required=True, help="localize JSONL output")
    p.add_argument("--poses", type=Path, required=True, help="ground-truth query poses")
    p.add_argument("--map", type=Path, required=True, help="map file (with points)")
    p.add_argument("--scans", type=Path, required=True, help="query scan directory")
    p.add_argument("--radius", type=float, default=2.0, help="success radius, meters")
    p.set_defaults(func=cmd_evaluate_wakeup)

    p = ev_sub.add_parser("retrieval", help="descriptor precision-recall sweep")
    _common_flags(p)
    p.add_argument("--scans", type=Path, required=True, help="scan directory")
    p.add_argument("--poses", type=Path, required=True, help="ground-truth poses")
    p.add_argument("--iou-threshold", type=float,
                   default=evaluation.DEFAULT_IOU_THRESHOLD)
    p.set_defaults(func=cmd_evaluate_retrieval)

    p = sub.add_parser("export-training",
                       help="export voxel grids, labels, and optional image patches")
    _common_flags(p)
    p.add_argument("--scans", type=Path, required=True, help="scan directory")
    p.add_argument("--poses", type=Path, required=True, help="ground-truth poses")
    p.add_argument("--images", type=Path, help="camera image directory (PNG per scan)")
    p.add_argument("--iou-threshold", type=float,
                   default=evaluation.DEFAULT_IOU_THRESHOLD)
    p.set_defaults(func=cmd_export_training)

    sy = sub.add_parser("synth", help="synthetic world tools")
    sy_sub = sy.add_subparsers(dest="tool", required=True)

    p = sy_sub.add_parser("generate", help="generate a world plus map/query pose files")
    _common_flags(p)
    p.add_argument("--n-objects", type=int, default=30)
    p.add_argument("--extent", type=float, default=50.0)
    p.add_argument("--n-map-poses", type=int, default=20)
    p.add_argument("--n-query-poses", type=int, default=10)
    p.set_defaults(func=cmd_synth_generate)

    p = sy_sub.add_parser("scan", help="simulate scans of a world along a pose file")
    _common_flags(p)
    p.add_argument("--world", type=Path, required=True)
    p.add_argument("--poses", type=Path, required=True)
    p.add_argument("--noise-sigma", type=float, default=0.0, help="range noise, meters")
    p.set_defaults(func=cmd_synth_scan)

    return parser


def _load_config(args) -> PipelineConfig:
    if args.config is None:
        return PipelineConfig()
    return load_pipeline_config(args.config)


def _out_dir(args) -> Path:
    args.output.mkdir(parents=True, exist_ok=True)
    return args.output


def _load_scans(directory: Path) -> list[Scan]:
    paths = load_scan_directory(directory)
    if not paths:
        raise DataError(f"no scan files in {directory}")
    scans = []
    for i, p in enumerate(paths):
        scan_id = int(p.stem) if p.stem.isdigit() else i
        scans.append(read_kitti_scan(p, scan_id=scan_id))
    return scans


def _poses_by_id(path: Path) -> dict:
    return {e.scan_id: e.T_world_sensor for e in read_kitti_poses(path)}


def cmd_build_map(args) -> int:
    cfg = _load_config(args)
    if cfg.dataset.scan_dir is None or cfg.dataset.poses is None:
        raise ConfigError("build-map needs [dataset] scan_dir and poses in the config")
    scans = _load_scans(cfg.dataset.scan_dir)
    poses = _poses_by_id(cfg.dataset.poses)
    smap = build_map_from_trajectory(scans, poses, cfg)
    out = _out_dir(args) / "map.oslm"
    save_map(smap, out, include_points=cfg.include_points)
    log.info("map with %d segments from %d scans -> %s", len(smap), len(scans), out)
    return 0


def cmd_localize(args) -> int:
    cfg = _load_config(args)
    smap = load_map(args.map)
    backend = cfg.make_backend()
    scans = _load_scans(args.scans)
    lines = []
    for scan in scans:
        res = localize_scan(smap, scan, cfg, backend)
        line = json.dumps(result_to_json(res))
        print(line)
        lines.append(line)
    out = _out_dir(args) / "localize.jsonl"
    out.write_text("\n".join(lines) + "\n")
    log.info("%d/%d scans accepted -> %s",
             sum(1 for ln in lines if json.loads(ln)["accepted"]), len(lines), out)
    return 0


def _read_results(path: Path) -> list:
    if not path.is_file():
        raise DataError(f"results file not found: {path}")
    results = []
    for line in path.read_text().splitlines():
        if line.strip():
            results.append(result_from_json(json.loads(line)))
    return results


def _segment_points_only(scan: Scan, cfg: PipelineConfig) -> Scan:
    """Reduce a scan to its segment points so ICP compares like with like:
    the map stores segment points, not ground or clutter."""
    segments, _, _ = segment_scan(scan, cfg.intrinsics, cfg.segmentation)
    if not segments:
        return scan
    pts = np.concatenate([s.points for s in segments])
    return Scan(scan.id, pts, None, scan.timestamp)


def cmd_evaluate_wakeup(args) -> int:
    cfg = _load_config(args)
    results = _read_results(args.results)
    poses = _poses_by_id(args.poses)
    smap = load_map(args.map)
    query_scans = {s.id: _segment_points_only(s, cfg) for s in _load_scans(args.scans)}

    records, cdf = evaluation.evaluate_wakeup(results, poses, args.radius)
    report = evaluation.evaluate_localization(results, poses, smap, query_scans,
                                              cfg.icp, args.radius)
    out = _out_dir(args)
    evaluation.write_wakeup_cdf(cdf, out / "wakeup_cdf.csv")
    evaluation.write_loc_errors(report.errors, out / "loc_errors.csv")
    evaluation.write_summary({
        "recall": report.recall,
        "precision": report.precision,
        "auc": None,
        "error_mean_m": report.error_mean,
        "error_std_m": report.error_std,
        "n_queries": report.n_queries,
        "n_accepted": report.n_accepted,
        "n_successes": report.n_successes,
    }, out / "summary.json")
    log.info("recall %.3f precision %.3f over %d queries -> %s",
             report.recall, report.precision, report.n_queries, out)
    return 0


def _describe_all(scans, cfg: PipelineConfig):
    """Segment and describe every scan; returns (segments by scan, descriptor dict)."""
    backend = cfg.make_backend()
    all_segments = {}
    descriptors = {}
    for scan in scans:
        segments, _, _ = segment_scan(scan, cfg.intrinsics, cfg.segmentation)
        all_segments[scan.id] = segments
        for seg in segments:
            d = backend.describe(seg)
            if d is not None:
                descriptors[(scan.id, seg.id)] = d
    return all_segments, descriptors


def _cross_scan_labels(all_segments, poses, iou_threshold):
    labels = []
    ids = sorted(all_segments)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            labels.extend(evaluation.label_correspondences(
                all_segments[a], all_segments[b], poses, iou_threshold))
    return labels


def cmd_evaluate_retrieval(args) -> int:
    cfg = _load_config(args)
    scans = _load_scans(args.scans)
    poses = _poses_by_id(args.poses)
    all_segments, descriptors = _describe_all(scans, cfg)
    labels = _cross_scan_labels(all_segments, poses, args.iou_threshold)
    points, auc = evaluation.evaluate_retrieval(descriptors, labels)
    out = _out_dir(args)
    evaluation.write_pr_curve(points, out / "pr_curve.csv")
    cross = [lab for lab in labels if lab.scan_a != lab.scan_b]
    evaluation.write_summary({
        "recall": None,
        "precision": None,
        "auc": auc,
        "error_mean_m": None,
        "error_std_m": None,
        "n_pairs": len(cross),
        "n_positive": sum(1 for lab in cross if lab.is_match),
    }, out / "summary.json")
    log.info("retrieval AUC %.3f over %d thresholds -> %s", auc, len(points), out)
    return 0


def cmd_export_training(args) -> int:
    cfg = _load_config(args)
    scans = _load_scans(args.scans)
    poses = _poses_by_id(args.poses)
    all_segments, _ = _describe_all(scans, cfg)
    labels = _cross_scan_labels(all_segments, poses, args.iou_threshold)

    out = _out_dir(args)
    voxel_dir = out / "voxels"
    voxel_dir.mkdir(exist_ok=True)
    keys = []
    for scan_id in sorted(all_segments):
        for seg in all_segments[scan_id]:
            grid = voxelize(seg)
            save_voxel_grid(grid, voxel_dir / f"scan{scan_id}_seg{seg.id}.osvx")
            keys.append((scan_id, seg.id))

    groups = _match_groups(keys, labels)
    with open(out / "groups.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scan_id", "segment_id", "group_id"])
        for (scan_id, seg_id) in keys:
            w.writerow([scan_id, seg_id, groups[(scan_id, seg_id)]])

    with open(out / "labels.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scan_a", "segment_a", "scan_b", "segment_b", "iou", "is_match"])
        for lab in labels:
            w.writerow([lab.scan_a, lab.segment_a, lab.scan_b, lab.segment_b,
                        f"{lab.overlap_iou:.6f}", int(lab.is_match)])

    if args.images is not None:
        _export_patches(args, cfg, all_segments, out)
    log.info("exported %d voxel grids, %d labels -> %s", len(keys), len(labels), out)
    return 0


def _match_groups(keys, labels) -> dict:
    """Union-find over is_match edges; group ids numbered by first appearance."""
    parent = {k: k for k in keys}

    def find(k):
        while parent[k] != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    for lab in labels:
        if not lab.is_match:
            continue
        a, b = (lab.scan_a, lab.segment_a), (lab.scan_b, lab.segment_b)
        if a in parent and b in parent:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    numbered = {}
    out = {}
    for k in keys:
        root = find(k)
        if root not in numbered:
            numbered[root] = len(numbered)
        out[k] = numbered[root]
    return out


def _export_patches(args, cfg, all_segments, out: Path) -> None:
    if cfg.dataset.calibration is None:
        raise ConfigError("--images needs a [dataset] calibration with a [camera]")
    _, camera = load_calibration(cfg.dataset.calibration)
    if camera is None:
        raise ConfigError("calibration has no [camera] section; cannot export patches")
    from PIL import Image

    images = {}
    patches = []
    for scan_id in sorted(all_segments):
        img_path = args.images / f"{scan_id:06d}.png"
        if not img_path.is_file():
            continue
        images[scan_id] = np.asarray(Image.open(img_path))
        for seg in all_segments[scan_id]:
            patch = extract_patch(seg, camera, image_id=scan_id)
            if patch is not None:
                patches.append((scan_id, seg.id, patch))
    save_patch_crops(patches, images, out / "patches")


def cmd_synth_generate(args) -> int:
    world = make_world(args.seed, n_objects=args.n_objects, extent=args.extent)
    out = _out_dir(args)
    save_world(world, out / "world.toml")
    half = 0.4 * args.extent
    start, end = np.array([-half, -half]), np.array([half, half])
    map_poses = path_poses(start, end, args.n_map_poses, seed=args.seed)
    query_poses = path_poses(start, end, args.n_query_poses,
                             lateral_jitter=0.5, yaw_jitter=0.2, seed=args.seed + 1)
    write_kitti_poses(map_poses, out / "map_poses.txt")
    write_kitti_poses(query_poses, out / "query_poses.txt")
    log.info("world with %d objects + %d/%d poses -> %s",
             args.n_objects, args.n_map_poses, args.n_query_poses, out)
    return 0


def cmd_synth_scan(args) -> int:
    cfg = _load_config(args)
    world = load_world(args.world)
    poses = read_kitti_poses(args.poses)
    out = _out_dir(args)
    intr = cfg.intrinsics if args.config else vlp16_intrinsics()
    for entry in poses:
        scan = simulate_scan(world, entry.T_world_sensor, intr,
                             noise_sigma=args.noise_sigma,
                             seed=args.seed + entry.scan_id,
                             scan_id=entry.scan_id)
        write_kitti_scan(scan, out / f"{entry.scan_id:06d}.bin")
    log.info("%d scans -> %s", len(poses), out)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
