"""Command-line entry points for descriptor training.

Exit codes: 0 success, 2 bad arguments or configuration, 3 unusable data.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .data import load_export_dir
from .errors import ConfigError, DataError
from .formats import load_embeddings, save_embeddings
from .train import (TrainConfig, embed_samples, toy_benchmark,
                    train_fused_descriptor, train_lidar_descriptor)


def _add_train_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dim", type=int, default=64,
                   help="embedding dimensionality")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--steps-per-epoch", type=int, default=0,
                   help="0 covers the dataset once per epoch")
    p.add_argument("--groups-per-batch", type=int, default=8,
                   help="distinct groups per training batch")
    p.add_argument("--samples-per-group", type=int, default=4)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", type=Path, default=None,
                   help="write a JSON training report here")


def _config_from_args(args) -> TrainConfig:
    return TrainConfig(dim=args.dim, margin=args.margin,
                       groups_per_batch=args.groups_per_batch,
                       samples_per_group=args.samples_per_group,
                       learning_rate=args.learning_rate, epochs=args.epochs,
                       steps_per_epoch=args.steps_per_epoch, seed=args.seed)


def _write_report(path: Path | None, payload: dict) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_train_lidar(args) -> int:
    cfg = _config_from_args(args)
    samples = load_export_dir(args.data)
    model, losses = train_lidar_descriptor(samples, cfg)
    embeddings = embed_samples(model, samples)
    save_embeddings(embeddings, args.output)
    print(f"trained on {len(samples)} samples; wrote {len(embeddings)} "
          f"embeddings to {args.output}")
    _write_report(args.report, {
        "command": "train-lidar",
        "config": dataclasses.asdict(cfg),
        "n_samples": len(samples),
        "epoch_losses": losses,
    })
    return 0


def cmd_train_fused(args) -> int:
    cfg = _config_from_args(args)
    image_embeddings = None
    if args.image_embeddings is not None:
        image_embeddings = load_embeddings(args.image_embeddings)
    samples = load_export_dir(args.data, with_patches=image_embeddings is None)
    model, losses = train_fused_descriptor(samples, cfg, image_embeddings)
    embeddings = embed_samples(model, samples, image_embeddings, cfg.seed)
    save_embeddings(embeddings, args.output)
    print(f"trained fused model on {len(samples)} samples; wrote "
          f"{len(embeddings)} embeddings to {args.output}")
    _write_report(args.report, {
        "command": "train-fused",
        "config": dataclasses.asdict(cfg),
        "n_samples": len(samples),
        "image_source": "files" if image_embeddings is not None else "patches",
        "epoch_losses": losses,
    })
    return 0


def cmd_toy_benchmark(args) -> int:
    cfg = _config_from_args(args)
    result = toy_benchmark(cfg, n_classes=args.classes,
                           per_class=args.per_class,
                           per_class_test=args.holdout,
                           data_seed=args.data_seed)
    if args.output is not None:
        save_embeddings(result["test_embeddings"], args.output)
    print(f"held-out recall@1 {result['holdout_recall_at_1']:.3f} "
          f"({result['n_test']} test samples, "
          f"{result['train_seconds']:.1f} s training)")
    _write_report(args.report, {
        "command": "toy-benchmark",
        "config": dataclasses.asdict(cfg),
        "n_classes": result["n_classes"],
        "n_train": result["n_train"],
        "n_test": result["n_test"],
        "epoch_losses": result["epoch_losses"],
        "train_seconds": result["train_seconds"],
        "holdout_recall_at_1": result["holdout_recall_at_1"],
    })
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segtrainer",
        description="Train compact descriptors for voxelized object segments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-lidar",
                       help="train the voxel-only descriptor on an export dir")
    p.add_argument("--data", type=Path, required=True,
                   help="export directory with groups.csv and voxels/")
    p.add_argument("--output", type=Path, required=True,
                   help="embedding file to write")
    _add_train_options(p)
    p.set_defaults(func=cmd_train_lidar)

    p = sub.add_parser("train-fused",
                       help="train the voxel+image descriptor")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--image-embeddings", type=Path, default=None,
                   help="precomputed image vectors; omit to run the built-in "
                        "frozen patch network on exported crops")
    _add_train_options(p)
    p.set_defaults(func=cmd_train_fused)

    p = sub.add_parser("toy-benchmark",
                       help="train and score on the synthetic shape classes")
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--per-class", type=int, default=30)
    p.add_argument("--holdout", type=int, default=6,
                   help="held-out samples per class")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--output", type=Path, default=None,
                   help="optionally write held-out embeddings here")
    _add_train_options(p)
    p.set_defaults(func=cmd_toy_benchmark)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
