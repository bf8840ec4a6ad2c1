"""End-to-end reconstruction pipeline over a view graph.

Stage order: verify matches -> decompose edges -> epipole/angle filter ->
build tracks -> rotation averaging -> rotation-consistency edge filter ->
global positioning -> angular prefilter -> bundle-adjustment rounds ->
camera clustering -> per-cluster export.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .bundle import BaConfig, prefilter_observations, run_global_ba
from .clustering import build_covisibility, cluster_cameras
from .core import Pose, Rotation
from .io_formats import read_view_graph, write_colmap_text, write_ply
from .positioning import PositioningError, build_problem, solve_positioning
from .reconstruction import Reconstruction, RecImage
from .rotation_averaging import (
    RotationEdge,
    RotationProblem,
    connected_components,
    filter_edges_by_rotation,
    solve_rotation_averaging,
)
from .viewgraph import (
    Track,
    ViewGraph,
    build_tracks,
    decompose_edge,
    filter_epipole_and_angle,
    verify_matches,
)

log = logging.getLogger("gsfm.pipeline")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    input_path: Optional[str] = None
    output_dir: Optional[str] = None
    seed: int = 42
    threads: int = 1
    skip_rotation_filter: bool = False
    skip_clustering: bool = False
    skip_ba: bool = False
    verify_px: float = 4.0
    min_triangulation_angle_deg: float = 1.0
    min_epipole_angle_deg: float = 1.0
    rot_filter_deg: float = 10.0
    rot_sigma_deg: float = 5.0
    huber_positioning: float = 0.1
    huber_ba_px: float = 1.0
    max_ba_rounds: int = 5
    ba_stop_ratio: float = 0.001
    reproj_filter_px: float = 4.0
    prefilter_deg_calibrated: float = 1.0
    prefilter_deg_uncalibrated: float = 2.0
    write_ply: bool = True

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        for name in (
            "verify_px",
            "min_triangulation_angle_deg",
            "min_epipole_angle_deg",
            "rot_filter_deg",
            "huber_positioning",
            "huber_ba_px",
            "reproj_filter_px",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_ba_rounds < 1:
            raise ValueError("max_ba_rounds must be >= 1")
        if not (0.0 < self.ba_stop_ratio < 1.0):
            raise ValueError("ba_stop_ratio must be in (0, 1)")

    def ba_config(self) -> BaConfig:
        return BaConfig(
            max_rounds=self.max_ba_rounds,
            huber_px=self.huber_ba_px,
            prefilter_deg_calibrated=self.prefilter_deg_calibrated,
            prefilter_deg_uncalibrated=self.prefilter_deg_uncalibrated,
            reproj_filter_px=self.reproj_filter_px,
            stop_ratio=self.ba_stop_ratio,
        )


@dataclass
class StageStats:
    name: str
    seconds: float
    counts: Dict[str, float] = field(default_factory=dict)


@dataclass
class PipelineResult:
    reconstruction: Reconstruction  # the full (pre-clustering) reconstruction
    clusters: List[List[int]]
    cluster_reconstructions: List[Reconstruction]
    stages: List[StageStats]
    rotations: Dict[int, Rotation]

    def summary(self) -> str:
        lines = ["stage timings and counts:"]
        for s in self.stages:
            counts = " ".join(f"{k}={v}" for k, v in s.counts.items())
            lines.append(f"  {s.name:<22s} {s.seconds*1000.0:8.1f} ms  {counts}")
        return "\n".join(lines)


def _stage(stages: List[StageStats], name: str, started: float, **counts) -> None:
    stats = StageStats(name, time.perf_counter() - started, dict(counts))
    stages.append(stats)
    log.info(
        "%s: %.1f ms %s",
        name,
        stats.seconds * 1000.0,
        " ".join(f"{k}={v}" for k, v in stats.counts.items()),
    )


def filter_pairs(graph: ViewGraph, config: PipelineConfig) -> Tuple[ViewGraph, List[StageStats]]:
    """Per-pair stages: verification, decomposition, epipole/angle filter."""
    stages: List[StageStats] = []
    out = ViewGraph(images=dict(graph.images), cameras=dict(graph.cameras))

    t0 = time.perf_counter()
    verified = {}
    for key in sorted(graph.edges):
        edge = graph.edges[key]
        img_i, img_j = graph.images[edge.i], graph.images[edge.j]
        e = verify_matches(
            edge,
            img_i.features,
            img_j.features,
            graph.camera_of(edge.i),
            graph.camera_of(edge.j),
            config.verify_px,
        )
        if e.valid:
            verified[key] = e
    _stage(stages, "verify_matches", t0, edges=len(verified),
           matches=sum(len(e.matches) for e in verified.values()))

    t0 = time.perf_counter()
    decomposed = {}
    for key in sorted(verified):
        e = verified[key]
        img_i, img_j = graph.images[e.i], graph.images[e.j]
        e = decompose_edge(
            e, img_i.features, img_j.features, graph.camera_of(e.i), graph.camera_of(e.j)
        )
        if e.valid:
            decomposed[key] = e
    _stage(stages, "decompose_edges", t0, edges=len(decomposed))

    t0 = time.perf_counter()
    for key in sorted(decomposed):
        e = decomposed[key]
        img_i, img_j = graph.images[e.i], graph.images[e.j]
        e = filter_epipole_and_angle(
            e,
            img_i.features,
            img_j.features,
            graph.camera_of(e.i),
            graph.camera_of(e.j),
            config.min_triangulation_angle_deg,
            config.min_epipole_angle_deg,
        )
        if e.valid and len(e.matches) >= 2:
            out.edges[key] = e
    _stage(stages, "epipole_angle_filter", t0, edges=len(out.edges),
           matches=sum(len(e.matches) for e in out.edges.values()))
    return out, stages


def run_pipeline(
    config: PipelineConfig, graph: Optional[ViewGraph] = None
) -> PipelineResult:
    """Execute all stages; raises PipelineError with the failing stage."""
    stages: List[StageStats] = []

    if graph is None:
        if config.input_path is None:
            raise PipelineError("input", "no input path or in-memory graph given")
        t0 = time.perf_counter()
        graph = read_view_graph(config.input_path)
        _stage(stages, "read_view_graph", t0, images=len(graph.images),
               edges=len(graph.edges))

    graph, pair_stages = filter_pairs(graph, config)
    stages.extend(pair_stages)
    if not graph.edges:
        raise PipelineError("pair_filters", "no valid two-view geometries survive")

    t0 = time.perf_counter()
    tracks = build_tracks(graph)
    _stage(stages, "build_tracks", t0, tracks=len(tracks))

    # rotation averaging on the largest connected component
    t0 = time.perf_counter()
    rot_edges = [
        RotationEdge(e.i, e.j, e.rotation, max(len(e.matches), 1))
        for e in graph.edges.values()
        if e.rotation is not None
    ]
    comps = connected_components(sorted(graph.images), rot_edges)
    if not comps or len(comps[0]) < 2:
        raise PipelineError("rotation_averaging", "no reconstructable component")
    main_nodes = set(comps[0])
    comp_edges = [e for e in rot_edges if e.i in main_nodes and e.j in main_nodes]
    problem = RotationProblem(sorted(main_nodes), comp_edges)
    solution = solve_rotation_averaging(problem, sigma_deg=config.rot_sigma_deg)
    rotations = solution.rotations
    _stage(stages, "rotation_averaging", t0, cameras=len(rotations),
           converged=int(solution.converged))

    if not config.skip_rotation_filter:
        t0 = time.perf_counter()
        graph, unregistered = filter_edges_by_rotation(
            graph, rotations, config.rot_filter_deg
        )
        for image_id in unregistered:
            rotations.pop(image_id, None)
        _stage(stages, "rotation_filter", t0, edges=len(graph.edges),
               unregistered=len(unregistered))

    t0 = time.perf_counter()
    try:
        pos_problem = build_problem(rotations, tracks, graph, config.huber_positioning)
        result = solve_positioning(pos_problem, seed=config.seed)
    except PositioningError as exc:
        raise PipelineError("global_positioning", str(exc))
    _stage(stages, "global_positioning", t0,
           cameras=len(result.centers), points=len(result.points),
           iters=result.report.iterations)

    # assemble the reconstruction
    recon = Reconstruction()
    recon.cameras = dict(graph.cameras)
    for image_id in sorted(graph.images):
        img = graph.images[image_id]
        registered = image_id in result.centers
        pose = (
            Pose(rotations[image_id], result.centers[image_id]) if registered else None
        )
        recon.images[image_id] = RecImage(
            image_id, img.camera_id, img.name, img.width, img.height, pose, registered
        )
    track_by_id = {t.track_id: t for t in tracks}
    for track_id in sorted(result.points):
        track = track_by_id[track_id]
        track.point = result.points[track_id]
        recon.tracks.append(track)

    t0 = time.perf_counter()
    removed = prefilter_observations(recon, config.ba_config())
    _stage(stages, "angular_prefilter", t0, removed=removed,
           tracks=len(recon.live_tracks()))

    if not config.skip_ba:
        t0 = time.perf_counter()
        try:
            reports = run_global_ba(recon, config.ba_config())
        except RuntimeError as exc:
            raise PipelineError("bundle_adjustment", str(exc))
        _stage(stages, "bundle_adjustment", t0, solver_stages=len(reports),
               mean_reproj_px=round(recon.mean_reprojection_error(), 4),
               tracks=len(recon.live_tracks()))

    if config.skip_clustering:
        clusters = [recon.registered_ids()]
    else:
        t0 = time.perf_counter()
        cov = build_covisibility(recon)
        clusters = cluster_cameras(cov)
        _stage(stages, "clustering", t0, clusters=len(clusters))

    cluster_recons = [extract_cluster(recon, cluster) for cluster in clusters]

    if config.output_dir is not None:
        t0 = time.perf_counter()
        out_root = Path(config.output_dir)
        for k, sub in enumerate(cluster_recons):
            model_dir = out_root / str(k)
            write_colmap_text(sub, model_dir)
            if config.write_ply:
                write_ply(sub, model_dir / "points.ply", include_cameras=True)
        _stage(stages, "export", t0, models=len(cluster_recons))

    return PipelineResult(recon, clusters, cluster_recons, stages, rotations)


def extract_cluster(recon: Reconstruction, image_ids: List[int]) -> Reconstruction:
    """Sub-reconstruction restricted to the given images; tracks keep only
    observations inside the cluster and need two to stay alive."""
    keep = set(image_ids)
    sub = Reconstruction()
    sub.cameras = dict(recon.cameras)
    for image_id, img in recon.images.items():
        registered = img.registered and image_id in keep
        sub.images[image_id] = RecImage(
            img.id, img.camera_id, img.name, img.width, img.height,
            img.pose if registered else None, registered,
        )
    for track in recon.live_tracks():
        obs = [o for o in track.observations if o[0] in keep]
        if len(obs) >= 2:
            sub.tracks.append(
                Track(track.track_id, obs, np.array(track.point), track.color)
            )
    return sub
