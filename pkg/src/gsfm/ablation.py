"""Positioning-stage ablations: point rays vs. relative-translation terms.

All variants share the production track machinery (verification,
decomposition, epipole/angle filters, track building) and ground-truth
rotations so that only the positioning formulation differs:

  PT      point-ray terms only (the production path)
  CAM     relative-translation terms only, then points with fixed cameras
  PT_CAM  both term families
  LUD     least-unsquared-deviations translation averaging (IRLS convex
          form with per-edge scales >= 1), then points with fixed cameras

Camera-only formulations degrade under noisy relative directions and
collapse under co-linear motion, which is exactly what these oracles are
meant to expose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import Rotation
from .evaluation import AlignmentResult, align_robust, auc
from .positioning import (
    PositioningProblem,
    build_problem,
    solve_positioning,
)
from .rotation_averaging import RotationEdge, connected_components
from .solver import HuberLoss, Problem, SolverOptions, solve
from .synthetic import SyntheticScene
from .viewgraph import (
    ViewGraph,
    build_tracks,
    decompose_edge,
    filter_epipole_and_angle,
    verify_matches,
)

PT = "PT"
CAM = "CAM"
PT_CAM = "PT_CAM"
LUD = "LUD"
VARIANTS = (PT, CAM, PT_CAM, LUD)

AUC_FRACTIONS = (0.01, 0.05, 0.1)


class AblationError(RuntimeError):
    pass


@dataclass
class AblationStats:
    variant: str
    centers: Dict[int, np.ndarray]
    points: Dict[int, np.ndarray]
    alignment: AlignmentResult
    max_error: float
    median_error: float
    auc_scores: Dict[float, float]  # fraction of diameter -> AUC


@dataclass
class EdgeDirection:
    i: int
    j: int
    v: np.ndarray  # unit direction from c_i toward c_j, world frame


def prepare_tracks(
    graph: ViewGraph, verify_px: float = 4.0
) -> Tuple[ViewGraph, list]:
    """Run the per-pair production filters and build tracks."""
    out = ViewGraph(images=dict(graph.images), cameras=dict(graph.cameras))
    for key in sorted(graph.edges):
        edge = graph.edges[key]
        img_i = graph.images[edge.i]
        img_j = graph.images[edge.j]
        intr_i = graph.camera_of(edge.i)
        intr_j = graph.camera_of(edge.j)
        edge = verify_matches(
            edge, img_i.features, img_j.features, intr_i, intr_j, verify_px
        )
        if not edge.valid:
            continue
        edge = decompose_edge(edge, img_i.features, img_j.features, intr_i, intr_j)
        if not edge.valid:
            continue
        edge = filter_epipole_and_angle(
            edge, img_i.features, img_j.features, intr_i, intr_j
        )
        if len(edge.matches) >= 2:
            out.edges[key] = edge
    tracks = build_tracks(out)
    return out, tracks


def edge_directions(graph: ViewGraph, rotations: Dict[int, Rotation]) -> List[EdgeDirection]:
    """World-frame center-to-center directions implied by the decomposed
    relative poses: c_j seen from i is -R_ij^T t_ij in frame i."""
    dirs = []
    for key in sorted(graph.edges):
        edge = graph.edges[key]
        if not edge.valid or edge.rotation is None or edge.direction is None:
            continue
        if edge.i not in rotations or edge.j not in rotations:
            continue
        d_cam = -edge.rotation.matrix().T @ edge.direction
        v = rotations[edge.i].inverse().apply(d_cam)
        n = np.linalg.norm(v)
        if n == 0:
            continue
        dirs.append(EdgeDirection(edge.i, edge.j, v / n))
    return dirs


def _solve_cam_terms(
    dirs: List[EdgeDirection],
    camera_ids: List[int],
    seed: int,
    huber_scale: float = 0.1,
    pt_problem: Optional[PositioningProblem] = None,
    cam_weight: float = 1.0,
    max_iters: int = 200,
) -> Dict[int, np.ndarray]:
    """BATA-style solve over relative-translation terms, optionally mixed
    with point-ray terms (PT_CAM)."""
    rng = np.random.default_rng(seed)
    p = Problem()
    for cam in camera_ids:
        p.add_parameter_block(f"c{cam}", rng.uniform(-1, 1, 3))
    track_ids = pt_problem.track_ids if pt_problem is not None else []
    for trk in track_ids:
        p.add_parameter_block(f"x{trk}", rng.uniform(-1, 1, 3))
    d_names = []

    if pt_problem is not None:
        rays = np.stack([t.ray for t in pt_problem.terms])
        weights = np.array([t.weight for t in pt_problem.terms])

        def pt_fn(c, x, d):
            n = len(c)
            w = weights[:n, None]
            diff = x - c
            r = w * (rays[:n] - d * diff)
            eye = np.broadcast_to(np.eye(3), (n, 3, 3))
            Jc = w[:, :, None] * eye * d[:, :, None]
            return r, [Jc, -Jc, -(w * diff)[:, :, None]]

        for k, term in enumerate(pt_problem.terms):
            name = f"dp{k}"
            p.add_parameter_block(name, [1.0], lower_bound=[1e-12])
            d_names.append(name)
            p.add_residual_block(
                pt_fn,
                [f"c{term.camera_id}", f"x{term.track_id}", name],
                3,
                loss=HuberLoss(huber_scale),
            )

    vdirs = np.stack([d.v for d in dirs])

    def cam_fn(ci, cj, d):
        n = len(ci)
        diff = cj - ci
        r = cam_weight * (vdirs[:n] - d * diff)
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        Jci = cam_weight * eye * d[:, :, None]
        return r, [Jci, -Jci, -cam_weight * diff[:, :, None]]

    for k, d in enumerate(dirs):
        name = f"dc{k}"
        p.add_parameter_block(name, [1.0], lower_bound=[1e-12])
        d_names.append(name)
        p.add_residual_block(
            cam_fn, [f"c{d.i}", f"c{d.j}", name], 3, loss=HuberLoss(huber_scale)
        )

    options = SolverOptions(
        max_iters=max_iters, fn_tol=1e-16, grad_tol=1e-14, eliminate=tuple(d_names)
    )
    report = solve(p, options)
    if report.termination == "FAILURE":
        raise AblationError(f"camera-term solve failed: {report.message}")
    centers = {cam: p.values(f"c{cam}") for cam in camera_ids}
    points = {trk: p.values(f"x{trk}") for trk in track_ids}
    return centers, points


def solve_lud(
    dirs: List[EdgeDirection],
    camera_ids: List[int],
    iters: int = 200,
    epsilon: float = 1e-8,
) -> Dict[int, np.ndarray]:
    """Least-unsquared-deviations translation averaging via IRLS.

    min sum ||(c_j - c_i) - s_e v_e|| with per-edge scales s_e >= 1; the
    scale constraint rules out collapse and one camera pins translation.
    Substituting s_e = 1 + u_e with u_e >= 0 makes the weighted LS
    non-homogeneous, so each sweep solves jointly for centers and u, then
    projects u onto the non-negative orthant and reweights by
    1/max(||r||, eps).
    """
    camera_ids = sorted(camera_ids)
    comp = connected_components(
        camera_ids, [RotationEdge(d.i, d.j, Rotation.identity(), 1.0) for d in dirs]
    )
    if len(comp) != 1 or not dirs:
        raise AblationError("LUD requires a connected direction graph")
    anchor = camera_ids[0]
    free = [c for c in camera_ids if c != anchor]
    col = {c: 3 * k for k, c in enumerate(free)}
    n_c = 3 * len(free)
    m = len(dirs)
    n_cols = n_c + m

    centers = {c: np.zeros(3) for c in camera_ids}
    u = np.zeros(m)

    for _ in range(iters):
        res = np.stack(
            [
                (centers[d.j] - centers[d.i]) - (1.0 + u[k]) * d.v
                for k, d in enumerate(dirs)
            ]
        )
        w = 1.0 / np.maximum(np.linalg.norm(res, axis=1), epsilon)
        rows, cols, vals = [], [], []
        rhs = np.zeros(n_cols)
        for k, d in enumerate(dirs):
            wk = w[k]
            entries: List[Tuple[int, np.ndarray]] = []
            if d.j != anchor:
                entries.append((col[d.j], np.eye(3)))
            if d.i != anchor:
                entries.append((col[d.i], -np.eye(3)))
            entries.append((n_c + k, -d.v.reshape(3, 1)))
            for ca, Ma in entries:
                rhs[ca : ca + Ma.shape[1]] += wk * (Ma.T @ d.v)
                for cb, Mb in entries:
                    h = wk * (Ma.T @ Mb)
                    hr, hc = h.shape
                    ii, jj = np.meshgrid(np.arange(hr), np.arange(hc), indexing="ij")
                    rows.append((ca + ii).ravel())
                    cols.append((cb + jj).ravel())
                    vals.append(h.ravel())
        H = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_cols, n_cols),
        ).tocsc()
        H = H + sp.identity(n_cols, format="csc") * 1e-12
        try:
            lu = spla.splu(H)
            z = lu.solve(rhs)
        except RuntimeError as exc:
            raise AblationError(f"LUD linear solve failed: {exc}")
        new_centers = dict(centers)
        new_centers[anchor] = np.zeros(3)
        for c in free:
            new_centers[c] = z[col[c] : col[c] + 3]
        new_u = np.maximum(z[n_c:], 0.0)
        delta = max(
            max(np.linalg.norm(new_centers[c] - centers[c]) for c in camera_ids),
            float(np.max(np.abs(new_u - u))),
        )
        centers, u = new_centers, new_u
        if delta < 1e-10:
            break
    return centers


def ablation_positioning(
    scene: SyntheticScene,
    graph: ViewGraph,
    variant: str,
    seed: int = 42,
    cam_weight: float = 1.0,
    align_threshold_frac: float = 0.25,
) -> AblationStats:
    """Run one positioning variant on a generated scene; statistics are
    computed after robust similarity alignment to the ground truth."""
    if variant not in VARIANTS:
        raise AblationError(f"unknown variant {variant!r}")
    gt = scene.ground_truth
    rotations = {
        i: img.pose.rotation for i, img in gt.images.items() if img.pose is not None
    }
    filtered, tracks = prepare_tracks(graph)
    pt_problem = build_problem(rotations, tracks, filtered)
    camera_ids = pt_problem.camera_ids

    if variant == PT:
        result = solve_positioning(pt_problem, seed=seed)
        centers, points = result.centers, result.points
    elif variant == PT_CAM:
        dirs = [
            d for d in edge_directions(filtered, rotations)
            if d.i in camera_ids and d.j in camera_ids
        ]
        if not dirs:
            raise AblationError("no usable relative directions")
        centers, points = _solve_cam_terms(
            dirs, camera_ids, seed, pt_problem=pt_problem, cam_weight=cam_weight
        )
    else:
        dirs = [
            d for d in edge_directions(filtered, rotations)
            if d.i in camera_ids and d.j in camera_ids
        ]
        if not dirs:
            raise AblationError("no usable relative directions")
        if variant == CAM:
            centers, _ = _solve_cam_terms(dirs, camera_ids, seed)
        else:  # LUD
            centers = solve_lud(dirs, camera_ids)
        # points with fixed cameras for downstream use
        fixed = solve_positioning(
            pt_problem, seed=seed, centers_init=centers, fix_cameras=True
        )
        points = fixed.points

    gt_centers = {
        i: img.pose.center
        for i, img in gt.images.items()
        if img.pose is not None and i in centers
    }
    diameter = gt.diameter()
    alignment = align_robust(
        centers, gt_centers, inlier_threshold=align_threshold_frac * diameter, seed=seed
    )
    errors = list(alignment.errors.values())
    auc_scores = {f: auc(errors, f * diameter) for f in AUC_FRACTIONS}
    return AblationStats(
        variant,
        centers,
        points,
        alignment,
        alignment.max_error(),
        alignment.median_error(),
        auc_scores,
    )
