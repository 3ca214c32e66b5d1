"""Figures rendered from the CSV/JSON artifacts of a run (headless Agg backend)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_ced(path) -> tuple[list[float], list[float]]:
    xs, ys = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            xs.append(float(row["threshold"]))
            ys.append(float(row["fraction"]))
    return xs, ys


def plot_run(run_dir, out_dir=None) -> list[Path]:
    """CED curves of every stage plus the re-clustering history, as PNG files."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    curves = sorted(p for p in run_dir.glob("*/ced.csv"))
    if curves:
        fig, ax = plt.subplots(figsize=(5, 4))
        for p in curves:
            xs, ys = read_ced(p)
            ax.plot(xs, ys, label=p.parent.name)
        ax.set_xlabel("NME (%)")
        ax.set_ylabel("fraction of images")
        ax.set_ylim(0, 1.02)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "ced.png", dpi=100)
        plt.close(fig)
        written.append(out_dir / "ced.png")

    for stage in ("duld", "duldpp"):
        rp = run_dir / stage / "report.json"
        if not rp.exists():
            continue
        hist = json.loads(rp.read_text()).get("extra", {}).get("recluster_history", [])
        if not hist:
            continue
        fig, ax = plt.subplots(figsize=(5, 4))
        its = [h["iteration"] for h in hist]
        ax.plot(its, [h["forward_nme"] for h in hist], marker="o", label="forward NME")
        if "clustering_accuracy" in hist[0]:
            ax2 = ax.twinx()
            ax2.plot(its, [h["clustering_accuracy"] for h in hist], color="tab:red", marker="s")
            ax2.set_ylabel("clustering accuracy (%)")
        ax.set_xlabel("iteration")
        ax.set_ylabel("forward NME (%)")
        ax.set_title(stage)
        fig.tight_layout()
        path = out_dir / f"{stage}_history.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written
