"""Command-line interface: pipeline, synth, and bench subcommands.

Exit codes: 0 success, 1 input error, 2 reconstruction failure.
"""

from __future__ import annotations

import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import click

from .bench import (
    DEFAULT_NOISE_LEVELS,
    read_csv,
    run_ablation_study,
    run_noise_study,
    write_csv,
)
from .io_formats import ParseError, write_view_graph
from .pipeline import PipelineConfig, PipelineError, run_pipeline
from .synthetic import COLINEAR, GENERAL, RING, SceneSpec, generate_scene

log = logging.getLogger("gsfm")

EXIT_INPUT_ERROR = 1
EXIT_RECONSTRUCTION_FAILURE = 2

_LAYOUTS = {"general": GENERAL, "colinear": COLINEAR, "ring": RING}


@contextmanager
def _thread_budget(threads: int):
    """Cap native BLAS pools at the requested budget (best effort). All
    reductions in this package use a fixed order, so results are identical
    for any budget."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=threads):
        yield


def _parse_seed_range(text: str):
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",") if x]


@click.group()
@click.option("--verbose", is_flag=True, help="Log per-stage progress.")
def main(verbose: bool):
    """Global structure-from-motion: reconstruct, synthesize, benchmark."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(name)s %(message)s",
    )


@main.command("pipeline")
@click.option("--input", "input_path", required=True, type=click.Path(), help="View-graph file.")
@click.option("--output", "output_dir", required=True, type=click.Path(), help="Model output directory.")
@click.option("--seed", default=42, show_default=True, type=int)
@click.option("--threads", default=1, show_default=True, type=int)
@click.option("--skip-rotation-filter", is_flag=True)
@click.option("--skip-clustering", is_flag=True)
@click.option("--skip-ba", is_flag=True)
@click.option("--rot-filter-deg", default=10.0, show_default=True, type=float)
@click.option("--huber-positioning", default=0.1, show_default=True, type=float)
@click.option("--huber-ba-px", default=1.0, show_default=True, type=float)
@click.option("--max-ba-rounds", default=5, show_default=True, type=int)
@click.option("--verify-px", default=4.0, show_default=True, type=float)
def pipeline_cmd(input_path, output_dir, seed, threads, skip_rotation_filter,
                 skip_clustering, skip_ba, rot_filter_deg, huber_positioning,
                 huber_ba_px, max_ba_rounds, verify_px):
    """Reconstruct a view-graph file into sparse model directories."""
    if not Path(input_path).exists():
        click.echo(f"error: input file not found: {input_path}", err=True)
        sys.exit(EXIT_INPUT_ERROR)
    try:
        config = PipelineConfig(
            input_path=input_path,
            output_dir=output_dir,
            seed=seed,
            threads=threads,
            skip_rotation_filter=skip_rotation_filter,
            skip_clustering=skip_clustering,
            skip_ba=skip_ba,
            rot_filter_deg=rot_filter_deg,
            huber_positioning=huber_positioning,
            huber_ba_px=huber_ba_px,
            max_ba_rounds=max_ba_rounds,
            verify_px=verify_px,
        )
    except ValueError as exc:
        click.echo(f"error: bad configuration: {exc}", err=True)
        sys.exit(EXIT_INPUT_ERROR)
    try:
        with _thread_budget(threads):
            result = run_pipeline(config)
    except ParseError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INPUT_ERROR)
    except PipelineError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_RECONSTRUCTION_FAILURE)
    recon = result.reconstruction
    click.echo(result.summary())
    click.echo(
        f"registered {len(recon.registered_ids())}/{len(recon.images)} images, "
        f"{len(recon.live_tracks())} tracks, "
        f"mean reprojection error {recon.mean_reprojection_error():.3f} px, "
        f"{len(result.clusters)} cluster(s) -> {output_dir}"
    )


@main.command("synth")
@click.option("--layout", type=click.Choice(sorted(_LAYOUTS)), default="general", show_default=True)
@click.option("--cams", default=20, show_default=True, type=int)
@click.option("--points", default=200, show_default=True, type=int)
@click.option("--noise-px", default=0.0, show_default=True, type=float)
@click.option("--outliers", default=0.0, show_default=True, type=float)
@click.option("--miscalibrated", default=0.0, show_default=True, type=float)
@click.option("--seed", default=42, show_default=True, type=int)
@click.option("--output", required=True, type=click.Path())
@click.option("--gt-json", type=click.Path(), default=None,
              help="Also dump ground-truth camera centers as JSON.")
def synth_cmd(layout, cams, points, noise_px, outliers, miscalibrated, seed, output, gt_json):
    """Generate a synthetic scene and write its view-graph file."""
    try:
        spec = SceneSpec(
            _LAYOUTS[layout],
            n_cams=cams,
            n_points=points,
            noise_px=noise_px,
            outlier_fraction=outliers,
            miscalibration_fraction=miscalibrated,
            seed=seed,
        )
        scene, graph = generate_scene(spec)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INPUT_ERROR)
    write_view_graph(graph, output)
    click.echo(
        f"wrote {output}: {len(graph.images)} images, {len(graph.edges)} pairs, "
        f"{scene.n_matches} matches ({scene.corrupted} corrupted)"
    )
    if gt_json:
        gt = {
            str(i): img.pose.center.tolist()
            for i, img in scene.ground_truth.images.items()
        }
        Path(gt_json).write_text(json.dumps(gt, indent=1))
        click.echo(f"wrote {gt_json}")


@main.command("bench")
@click.option("--ablation", "do_ablation", is_flag=True, help="Positioning-variant ablation.")
@click.option("--noise-study", "do_noise", is_flag=True, help="Noise-robustness study.")
@click.option("--layouts", default="general,colinear", show_default=True,
              help="Comma-separated layouts.")
@click.option("--seeds", default="0..9", show_default=True,
              help="Range A..B or comma-separated list.")
@click.option("--cams", default=12, show_default=True, type=int)
@click.option("--points", default=80, show_default=True, type=int)
@click.option("--csv", "csv_path", required=True, type=click.Path())
@click.option("--figures/--no-figures", default=True, show_default=True,
              help="Render matplotlib figures next to the CSV.")
def bench_cmd(do_ablation, do_noise, layouts, seeds, cams, points, csv_path, figures):
    """Run benchmark studies; write CSV (and figures) for plotting."""
    try:
        layout_list = [_LAYOUTS[x.strip().lower()] for x in layouts.split(",") if x.strip()]
        seed_list = _parse_seed_range(seeds)
    except (KeyError, ValueError) as exc:
        click.echo(f"error: bad layouts/seeds: {exc}", err=True)
        sys.exit(EXIT_INPUT_ERROR)
    if not do_ablation and not do_noise:
        do_ablation = do_noise = True
    rows = []
    if do_noise:
        noise_layouts = [l for l in layout_list if l != COLINEAR] or layout_list
        rows += run_noise_study(noise_layouts, seed_list, DEFAULT_NOISE_LEVELS, cams, points)
        click.echo(f"noise study: {len(rows)} runs")
    if do_ablation:
        before = len(rows)
        rows += run_ablation_study(layout_list, seed_list, n_cams=cams, n_points=points)
        click.echo(f"ablation study: {len(rows) - before} runs")
    write_csv(rows, csv_path)
    click.echo(f"wrote {csv_path}")
    if figures:
        from .report import render_figures

        for path in render_figures(rows, Path(csv_path).parent):
            click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
