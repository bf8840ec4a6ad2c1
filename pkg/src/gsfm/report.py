"""Figure rendering for benchmark CSVs: noise curves and ablation bars."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

VARIANT_ORDER = ("PT", "PT_CAM", "CAM", "LUD")
VARIANT_LABEL = {
    "PT": "points",
    "PT_CAM": "points + cameras",
    "CAM": "cameras",
    "LUD": "LUD",
}


def _group(rows, keys):
    grouped = defaultdict(list)
    for row in rows:
        grouped[tuple(row[k] for k in keys)].append(row)
    return grouped


def render_noise_figure(rows: List[Dict], path: Union[str, Path]) -> None:
    """Median aligned camera error and AUC vs. pixel noise, per layout."""
    rows = [r for r in rows if r["study"] == "noise"]
    if not rows:
        return
    fig, (ax_err, ax_auc) = plt.subplots(1, 2, figsize=(9.5, 3.6))
    for layout, layout_rows in sorted(_group(rows, ["layout"]).items()):
        by_noise = _group(layout_rows, ["noise_px"])
        noises = sorted(float(n) for (n,) in by_noise)
        med = [
            float(np.median([float(r["median_error"]) for r in by_noise[(n,)]]))
            for n in noises
        ]
        auc05 = [
            float(np.median([float(r["auc_005"]) for r in by_noise[(n,)]]))
            for n in noises
        ]
        ax_err.plot(noises, med, marker="o", label=layout[0])
        ax_auc.plot(noises, auc05, marker="o", label=layout[0])
    ax_err.set_yscale("log")
    ax_err.set_xlabel("pixel noise [px]")
    ax_err.set_ylabel("median aligned error")
    ax_err.set_title("positioning error vs. noise")
    ax_err.grid(True, alpha=0.3)
    ax_err.legend()
    ax_auc.set_xlabel("pixel noise [px]")
    ax_auc.set_ylabel("AUC @ 5% diameter")
    ax_auc.set_title("AUC vs. noise")
    ax_auc.set_ylim(0, 1.02)
    ax_auc.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_ablation_figure(rows: List[Dict], path: Union[str, Path]) -> None:
    """Per-variant median errors (bars) with per-seed scatter, per layout."""
    rows = [r for r in rows if r["study"] == "ablation"]
    if not rows:
        return
    layouts = sorted({r["layout"] for r in rows})
    fig, axes = plt.subplots(1, len(layouts), figsize=(4.8 * len(layouts), 3.8))
    if len(layouts) == 1:
        axes = [axes]
    for ax, layout in zip(axes, layouts):
        sub = [r for r in rows if r["layout"] == layout]
        variants = [v for v in VARIANT_ORDER if any(r["variant"] == v for r in sub)]
        medians, scatter = [], []
        for v in variants:
            errs = [float(r["median_error"]) for r in sub if r["variant"] == v]
            medians.append(float(np.median(errs)))
            scatter.append(errs)
        xs = np.arange(len(variants))
        ax.bar(xs, medians, width=0.6, alpha=0.6)
        for k, errs in enumerate(scatter):
            ax.plot(
                np.full(len(errs), xs[k]) + np.linspace(-0.12, 0.12, len(errs)),
                errs,
                ".",
                color="black",
                markersize=4,
            )
        ax.set_xticks(xs)
        ax.set_xticklabels([VARIANT_LABEL.get(v, v) for v in variants], rotation=20)
        ax.set_yscale("log")
        ax.set_ylabel("median aligned error (per seed)")
        ax.set_title(f"positioning constraints, {layout.lower()} layout")
        ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_figures(rows: List[Dict], out_dir: Union[str, Path]) -> List[Path]:
    """Render every applicable figure next to the CSV; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    noise_path = out_dir / "noise_study.png"
    if any(r["study"] == "noise" for r in rows):
        render_noise_figure(rows, noise_path)
        written.append(noise_path)
    ablation_path = out_dir / "ablation_study.png"
    if any(r["study"] == "ablation" for r in rows):
        render_ablation_figure(rows, ablation_path)
        written.append(ablation_path)
    return written
