"""Benchmark studies over synthetic scenes: noise robustness and the
positioning-variant ablation. Emits one CSV row per run for plotting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

from .ablation import AUC_FRACTIONS, CAM, LUD, PT, PT_CAM, VARIANTS, ablation_positioning
from .synthetic import COLINEAR, GENERAL, RING, SceneSpec, generate_scene

CSV_FIELDS = [
    "study",
    "layout",
    "variant",
    "seed",
    "noise_px",
    "outlier_fraction",
    "n_cams",
    "n_points",
    "diameter",
    "max_error",
    "median_error",
    "auc_001",
    "auc_005",
    "auc_010",
]

DEFAULT_NOISE_LEVELS = (0.0, 1.0, 2.0, 4.0, 8.0, 16.0)

# two-view estimation noise used by the ablation study: relative directions
# degrade faster than rays when pixel noise grows, and outlier matches imply
# outlier edges
ABLATION_REL_DIR_NOISE_PER_PX = 1.0  # degrees per pixel of image noise
ABLATION_REL_ROT_NOISE_PER_PX = 0.25


def _row(study, spec: SceneSpec, variant, stats) -> Dict[str, object]:
    return {
        "study": study,
        "layout": spec.layout,
        "variant": variant,
        "seed": spec.seed,
        "noise_px": spec.noise_px,
        "outlier_fraction": spec.outlier_fraction,
        "n_cams": spec.n_cams,
        "n_points": spec.n_points,
        "diameter": round(stats["diameter"], 9),
        "max_error": stats["max_error"],
        "median_error": stats["median_error"],
        "auc_001": stats["auc"][0.01],
        "auc_005": stats["auc"][0.05],
        "auc_010": stats["auc"][0.1],
    }


def _run_variant(spec: SceneSpec, variant: str, solver_seed: int = 42) -> Dict[str, object]:
    scene, graph = generate_scene(spec)
    st = ablation_positioning(scene, graph, variant, seed=solver_seed)
    return {
        "diameter": scene.ground_truth.diameter(),
        "max_error": st.max_error,
        "median_error": st.median_error,
        "auc": st.auc_scores,
    }


def run_noise_study(
    layouts: Sequence[str] = (GENERAL,),
    seeds: Sequence[int] = tuple(range(10)),
    noise_levels: Sequence[float] = DEFAULT_NOISE_LEVELS,
    n_cams: int = 12,
    n_points: int = 80,
) -> List[Dict[str, object]]:
    """Positioning-only runs across pixel-noise levels (no bundle
    adjustment), reproducing the monotone-degradation shape."""
    rows = []
    for layout in layouts:
        for noise in noise_levels:
            for seed in seeds:
                spec = SceneSpec(
                    layout, n_cams=n_cams, n_points=n_points, noise_px=noise, seed=seed
                )
                stats = _run_variant(spec, PT)
                rows.append(_row("noise", spec, PT, stats))
    return rows


def ablation_spec(layout: str, seed: int, n_cams: int = 12, n_points: int = 80) -> SceneSpec:
    """Scene protocol for the positioning ablation.

    GENERAL gets 2 px noise, 10% outlier matches, and correspondingly
    noisy/outlier-contaminated relative poses; COLINEAR stays noiseless to
    expose the translation-averaging degeneracy in isolation.
    """
    if layout == COLINEAR:
        return SceneSpec(layout, n_cams=n_cams, n_points=n_points, seed=seed)
    noise = 2.0
    return SceneSpec(
        layout,
        n_cams=n_cams,
        n_points=n_points,
        noise_px=noise,
        outlier_fraction=0.10,
        seed=seed,
        rel_dir_noise_deg=ABLATION_REL_DIR_NOISE_PER_PX * noise,
        rel_rot_noise_deg=ABLATION_REL_ROT_NOISE_PER_PX * noise,
        rel_outlier_fraction=0.10,
    )


def run_ablation_study(
    layouts: Sequence[str] = (GENERAL, COLINEAR),
    seeds: Sequence[int] = tuple(range(10)),
    variants: Sequence[str] = VARIANTS,
    n_cams: int = 12,
    n_points: int = 80,
) -> List[Dict[str, object]]:
    rows = []
    for layout in layouts:
        for seed in seeds:
            spec = ablation_spec(layout, seed, n_cams, n_points)
            for variant in variants:
                stats = _run_variant(spec, variant)
                rows.append(_row("ablation", spec, variant, stats))
    return rows


def write_csv(rows: Iterable[Dict[str, object]], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as out:
        writer = csv.DictWriter(out, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path: Union[str, Path]) -> List[Dict[str, object]]:
    with open(path, "r", newline="", encoding="utf-8") as handle:
        return [dict(row) for row in csv.DictReader(handle)]
