"""Joint global positioning of camera centers and 3D points.

Each observation contributes one normalized-direction term
``w * (v - d * (X - c))`` with a per-term inverse-depth factor d >= 0,
where v is the globally rotated unit camera ray of the observation. No
relative-translation terms enter the production problem.

The objective is bounded: minimizing over d >= 0 leaves sin(theta) for
ray/point angles below 90 degrees and 1 beyond, so outliers cannot
dominate. Combined with a Huber loss and LM, this converges reliably from
uniform random initialization in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import CameraIntrinsics, Rotation, ray_directions
from .solver import (
    HuberLoss,
    Problem,
    SolverOptions,
    SolverReport,
    solve,
)
from .viewgraph import Track, ViewGraph

UNCALIBRATED_WEIGHT = 0.5  # down-weight terms of cameras with untrusted intrinsics


class PositioningError(RuntimeError):
    pass


@dataclass
class PositioningTerm:
    camera_id: int
    track_id: int
    ray: np.ndarray  # v_ik, unit, world frame
    weight: float


@dataclass
class PositioningProblem:
    terms: List[PositioningTerm]
    camera_ids: List[int]
    track_ids: List[int]
    huber_scale: float = 0.1

    def __post_init__(self):
        self.camera_ids = sorted(set(self.camera_ids))
        self.track_ids = sorted(set(self.track_ids))


@dataclass
class PositioningResult:
    centers: Dict[int, np.ndarray]
    points: Dict[int, np.ndarray]
    factors: np.ndarray  # one per term, same order as problem.terms
    report: SolverReport
    under_constrained: bool


def residual(term: PositioningTerm, c: np.ndarray, X: np.ndarray, d: float) -> np.ndarray:
    """Weighted direction residual of one term: w * (v - d (X - c))."""
    return term.weight * (term.ray - d * (np.asarray(X) - np.asarray(c)))


def optimal_factor(v: np.ndarray, u: np.ndarray) -> float:
    """argmin over d >= 0 of ||v - d u|| for unit v."""
    uu = float(np.dot(u, u))
    if uu <= 0.0:
        return 0.0
    return max(float(np.dot(v, u)) / uu, 0.0)


def min_residual_norm(v: np.ndarray, u: np.ndarray) -> float:
    """Closed-form min over d >= 0 of ||v - d u|| for unit v.

    Equals sin(theta) for theta in [0, pi/2) and 1 beyond, where theta is
    the angle between v and u.
    """
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    nu = np.linalg.norm(u)
    if nu == 0.0:
        return 1.0
    cos_t = float(np.dot(v, u)) / nu
    if cos_t <= 0.0:
        return 1.0
    return float(np.sqrt(max(1.0 - cos_t * cos_t, 0.0)))


def build_problem(
    rotations: Dict[int, Rotation],
    tracks: Sequence[Track],
    graph: ViewGraph,
    huber_scale: float = 0.1,
) -> PositioningProblem:
    """One term per (registered camera, track observation), pruned so every
    camera and every track keeps at least two terms."""
    raw: List[Tuple[int, int, np.ndarray, float]] = []
    for track in tracks:
        for image_id, _feat, obs in track.observations:
            if image_id not in rotations:
                continue
            intr = graph.camera_of(image_id)
            ray_cam = ray_directions(intr, [[obs.u, obs.v]])[0]
            v = rotations[image_id].inverse().apply(ray_cam)
            weight = 1.0 if intr.calibrated else UNCALIBRATED_WEIGHT
            raw.append((image_id, track.track_id, v, weight))

    # drop cameras/tracks with fewer than two terms, to a fixed point
    while True:
        cam_count: Dict[int, int] = {}
        trk_count: Dict[int, int] = {}
        for cam, trk, _, _ in raw:
            cam_count[cam] = cam_count.get(cam, 0) + 1
            trk_count[trk] = trk_count.get(trk, 0) + 1
        bad_cams = {c for c, n in cam_count.items() if n < 2}
        bad_trks = {t for t, n in trk_count.items() if n < 2}
        if not bad_cams and not bad_trks:
            break
        raw = [r for r in raw if r[0] not in bad_cams and r[1] not in bad_trks]

    if not raw:
        raise PositioningError("no usable observation terms (empty reconstruction)")
    terms = [PositioningTerm(cam, trk, v, w) for cam, trk, v, w in raw]
    return PositioningProblem(
        terms,
        [t.camera_id for t in terms],
        [t.track_id for t in terms],
        huber_scale,
    )


def _is_under_constrained(problem: PositioningProblem) -> bool:
    n_t = len(problem.terms)
    n_c = len(problem.camera_ids)
    n_p = len(problem.track_ids)
    # residual dof vs. unknowns minus the 4-dof similarity gauge
    return 3 * n_t < 3 * n_c + 3 * n_p + n_t - 4


def solve_positioning(
    problem: PositioningProblem,
    seed: int = 42,
    max_iters: int = 200,
    centers_init: Optional[Dict[int, np.ndarray]] = None,
    points_init: Optional[Dict[int, np.ndarray]] = None,
    fix_cameras: bool = False,
) -> PositioningResult:
    """Robust LM from uniform random initialization in [-1, 1], d = 1.

    Deterministic for a fixed seed. Factors are clamped to stay positive
    after every accepted step (projection inside the solver). Passing
    explicit inits overrides the random ones; `fix_cameras` freezes the
    centers (used by ablation baselines for point-only refits).
    """
    rng = np.random.default_rng(seed)
    cams = problem.camera_ids
    trks = problem.track_ids
    n_terms = len(problem.terms)

    p = Problem()
    for cam in cams:
        init = rng.uniform(-1.0, 1.0, 3)
        if centers_init is not None and cam in centers_init:
            init = np.asarray(centers_init[cam], dtype=float)
        p.add_parameter_block(f"c{cam}", init, fixed=fix_cameras)
    for trk in trks:
        init = rng.uniform(-1.0, 1.0, 3)
        if points_init is not None and trk in points_init:
            init = np.asarray(points_init[trk], dtype=float)
        p.add_parameter_block(f"x{trk}", init)
    for k in range(n_terms):
        p.add_parameter_block(f"d{k}", [1.0], lower_bound=[1e-12])

    rays = np.stack([t.ray for t in problem.terms])
    weights = np.array([t.weight for t in problem.terms])

    def term_fn(c, x, d):
        n = len(c)
        v = rays[:n]
        w = weights[:n, None]
        diff = x - c
        r = w * (v - d * diff)
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        Jc = w[:, :, None] * eye * d[:, :, None]
        Jx = -Jc
        Jd = -(w * diff)[:, :, None]
        return r, [Jc, Jx, Jd]

    for k, term in enumerate(problem.terms):
        p.add_residual_block(
            term_fn,
            [f"c{term.camera_id}", f"x{term.track_id}", f"d{k}"],
            3,
            loss=HuberLoss(problem.huber_scale),
        )

    options = SolverOptions(
        max_iters=max_iters,
        fn_tol=1e-16,
        grad_tol=1e-14,
        eliminate=tuple(f"d{k}" for k in range(n_terms)),
    )
    report = solve(p, options)
    if report.termination == "FAILURE":
        raise PositioningError(f"positioning solver failed: {report.message}")

    centers = {cam: p.values(f"c{cam}") for cam in cams}
    points = {trk: p.values(f"x{trk}") for trk in trks}
    factors = np.array([p.values(f"d{k}")[0] for k in range(n_terms)])
    return PositioningResult(centers, points, factors, report, _is_under_constrained(problem))
