#!/usr/bin/env python3
"""Render the CSV reports of an experiment run as PNG figures.

Reads whichever of wakeup_cdf.csv, loc_errors.csv, and pr_curve.csv exist in
the given results directory and writes a matching .png next to each.
"""

import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_csv(path: Path) -> dict[str, list[float]]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {name: [float(r[name]) for r in rows] for name in rows[0]}


def plot_wakeup(path: Path) -> None:
    data = read_csv(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.step(data["distance_m"], data["probability"], where="post")
    ax.set_xlabel("distance traveled [m]")
    ax.set_ylabel("localization probability")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path.with_suffix(".png"), dpi=150)
    plt.close(fig)


def plot_errors(path: Path) -> None:
    data = read_csv(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    errors = data["icp_correction_m"]
    if errors:
        top = max(max(errors), 0.05)
        bins = [0.05 * i for i in range(int(top / 0.05) + 2)]
        ax.hist(errors, bins=bins, edgecolor="black")
    ax.set_xlabel("ICP correction [m]")
    ax.set_ylabel("queries")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path.with_suffix(".png"), dpi=150)
    plt.close(fig)


def plot_pr(path: Path) -> None:
    data = read_csv(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(data["recall"], data["precision"], marker=".")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.02)
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path.with_suffix(".png"), dpi=150)
    plt.close(fig)


PLOTTERS = {
    "wakeup_cdf.csv": plot_wakeup,
    "loc_errors.csv": plot_errors,
    "pr_curve.csv": plot_pr,
}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("results_dir", type=Path)
    args = ap.parse_args()
    if not args.results_dir.is_dir():
        print(f"error: {args.results_dir} is not a directory")
        return 2
    made = 0
    for name, plotter in PLOTTERS.items():
        src = args.results_dir / name
        if src.is_file():
            plotter(src)
            print(f"{src} -> {src.with_suffix('.png')}")
            made += 1
    if made == 0:
        print(f"no known report CSVs in {args.results_dir}")
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
