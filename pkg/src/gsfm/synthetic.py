"""Synthetic multi-view scenes with known ground truth.

Cameras and points are laid out per the requested layout, observations are
exact projections (cheirality-positive, inside the image) optionally
corrupted by gaussian pixel noise and by replacing a fraction of matches
with wrong pairings. Pairwise relative poses are derived exactly from the
ground truth and can be perturbed to model two-view estimation error.
Everything is deterministic per seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import (
    PINHOLE,
    CameraIntrinsics,
    Observation,
    Pose,
    Rotation,
    exp_map,
    project_many,
)
from .reconstruction import Reconstruction, RecImage
from .viewgraph import (
    CALIBRATED,
    UNCALIBRATED,
    ImageInfo,
    Track,
    TwoViewGeometry,
    ViewGraph,
    fundamental_from_essential,
)

GENERAL = "GENERAL"
COLINEAR = "COLINEAR"
RING = "RING"

LAYOUTS = (GENERAL, COLINEAR, RING)


@dataclass
class SceneSpec:
    layout: str = GENERAL
    n_cams: int = 20
    n_points: int = 200
    noise_px: float = 0.0
    outlier_fraction: float = 0.0
    miscalibration_fraction: float = 0.0
    seed: int = 42
    width: int = 640
    height: int = 480
    focal: float = 500.0
    min_shared: int = 15
    # perturbations of the derived pairwise poses (two-view estimation error)
    rel_rot_noise_deg: float = 0.0
    rel_dir_noise_deg: float = 0.0
    rel_outlier_fraction: float = 0.0

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.n_cams < 2:
            raise ValueError("need at least 2 cameras")
        if self.n_points < 8:
            raise ValueError("need at least 8 points")
        if not (0.0 <= self.outlier_fraction < 1.0):
            raise ValueError("outlier fraction must be in [0, 1)")


@dataclass
class SyntheticScene:
    spec: SceneSpec
    ground_truth: Reconstruction
    true_intrinsics: Dict[int, CameraIntrinsics]
    feature_point: Dict[int, np.ndarray]  # image id -> point index per feature
    n_matches: int
    corrupted: int


def _look_at(center: np.ndarray, target: np.ndarray, up_hint: np.ndarray) -> Rotation:
    f = target - center
    f = f / np.linalg.norm(f)
    r = np.cross(f, up_hint)
    nr = np.linalg.norm(r)
    if nr < 1e-9:
        alt = np.array([1.0, 0.0, 0.0])
        r = np.cross(f, alt)
        nr = np.linalg.norm(r)
    r = r / nr
    d = np.cross(f, r)
    return Rotation.from_matrix(np.stack([r, d, f]))


def _layout_cameras(spec: SceneSpec, rng: np.random.Generator) -> List[Pose]:
    poses = []
    if spec.layout == GENERAL:
        # cameras on a sphere of radius 2, looking inward at jittered targets
        # (the jitter varies per-pair covisibility, as real capture does)
        dirs = rng.standard_normal((spec.n_cams, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        for k in range(spec.n_cams):
            c = 2.0 * dirs[k]
            target = rng.uniform(-0.3, 0.3, 3)
            poses.append(Pose(_look_at(c, target, np.array([0.0, 0.0, 1.0])), c))
    elif spec.layout == COLINEAR:
        # cameras on a line along x, all side-facing (+z)
        xs = np.linspace(-2.0, 2.0, spec.n_cams)
        for x in xs:
            c = np.array([x, 0.0, 0.0])
            R = Rotation.identity()  # looking along +z
            poses.append(Pose(R, c))
    else:  # RING
        angles = np.linspace(0.0, 2.0 * math.pi, spec.n_cams, endpoint=False)
        for a in angles:
            c = 2.0 * np.array([math.cos(a), math.sin(a), 0.0])
            poses.append(Pose(_look_at(c, np.zeros(3), np.array([0.0, 0.0, 1.0])), c))
    return poses


def _layout_points(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.layout == COLINEAR:
        return rng.uniform([-3.0, -1.5, 4.0], [3.0, 1.5, 7.0], size=(spec.n_points, 3))
    return rng.uniform(-0.65, 0.65, size=(spec.n_points, 3))


def relative_pose(pose_i: Pose, pose_j: Pose) -> Tuple[Rotation, np.ndarray]:
    """(R_ij, unit t_ij) with p_j = R_ij p_i + t_ij."""
    R_ij = pose_j.rotation * pose_i.rotation.inverse()
    t = pose_j.rotation.apply(pose_i.center - pose_j.center)
    n = np.linalg.norm(t)
    if n > 0:
        t = t / n
    return R_ij, t


def _skew(t: np.ndarray) -> np.ndarray:
    return np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])


def essential_from_pose(R_ij: Rotation, t_ij: np.ndarray) -> np.ndarray:
    return _skew(t_ij) @ R_ij.matrix()


def _perturb_direction(t: np.ndarray, angle_rad: float, rng: np.random.Generator) -> np.ndarray:
    if angle_rad <= 0:
        return t
    axis = rng.standard_normal(3)
    axis -= t * np.dot(axis, t)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return t
    axis /= n
    a = abs(rng.normal(0.0, angle_rad))
    out = math.cos(a) * t + math.sin(a) * axis
    return out / np.linalg.norm(out)


def generate_scene(spec: SceneSpec) -> Tuple[SyntheticScene, ViewGraph]:
    """Build the ground-truth reconstruction and its noisy view graph."""
    rng = np.random.default_rng(spec.seed)
    poses = _layout_cameras(spec, rng)
    points = _layout_points(spec, rng)

    # per-image camera; a fraction gets an untrusted, perturbed focal prior
    n_miscal = int(spec.miscalibration_fraction * spec.n_cams)
    miscal = set(rng.choice(spec.n_cams, size=n_miscal, replace=False).tolist())
    true_intr: Dict[int, CameraIntrinsics] = {}
    prior_intr: Dict[int, CameraIntrinsics] = {}
    for i in range(spec.n_cams):
        intr = CameraIntrinsics(
            PINHOLE, spec.focal, spec.focal, spec.width / 2.0, spec.height / 2.0
        )
        true_intr[i] = intr
        if i in miscal:
            sign = 1.0 if rng.uniform() < 0.5 else -1.0
            f = spec.focal * (1.0 + 0.2 * sign)
            prior_intr[i] = CameraIntrinsics(
                PINHOLE, f, f, intr.cx, intr.cy, calibrated=False
            )
        else:
            prior_intr[i] = intr

    # exact observations: in front and inside the image
    obs_uv: Dict[int, np.ndarray] = {}
    obs_pt: Dict[int, np.ndarray] = {}
    visible: Dict[int, np.ndarray] = {}
    for i in range(spec.n_cams):
        uv, in_front = project_many(true_intr[i], poses[i], points)
        ok = (
            in_front
            & (uv[:, 0] >= 0)
            & (uv[:, 0] < spec.width)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] < spec.height)
        )
        if spec.noise_px > 0:
            uv = uv + rng.normal(0.0, spec.noise_px, uv.shape)
            ok &= (
                (uv[:, 0] >= 0)
                & (uv[:, 0] < spec.width)
                & (uv[:, 1] >= 0)
                & (uv[:, 1] < spec.height)
            )
        idx = np.nonzero(ok)[0]
        obs_uv[i] = uv[idx]
        obs_pt[i] = idx
        visible[i] = ok

    feature_of: List[Dict[int, int]] = []
    for i in range(spec.n_cams):
        feature_of.append({int(pt): f for f, pt in enumerate(obs_pt[i])})

    graph = ViewGraph()
    for i in range(spec.n_cams):
        graph.cameras[i] = prior_intr[i]
        graph.add_image(
            ImageInfo(i, i, f"synth_{i:04d}.png", spec.width, spec.height, obs_uv[i])
        )

    # pairwise edges over shared points
    edge_list: List[TwoViewGeometry] = []
    for i in range(spec.n_cams):
        for j in range(i + 1, spec.n_cams):
            shared = sorted(set(feature_of[i]) & set(feature_of[j]))
            if len(shared) < spec.min_shared:
                continue
            matches = np.array(
                [[feature_of[i][p], feature_of[j][p]] for p in shared], dtype=np.int64
            )
            R_ij, t_ij = relative_pose(poses[i], poses[j])
            if spec.rel_rot_noise_deg > 0:
                w = rng.standard_normal(3)
                w *= math.radians(abs(rng.normal(0, spec.rel_rot_noise_deg))) / max(
                    np.linalg.norm(w), 1e-12
                )
                R_ij = exp_map(w) * R_ij
            t_ij = _perturb_direction(
                t_ij, math.radians(spec.rel_dir_noise_deg), rng
            )
            if spec.rel_outlier_fraction > 0 and rng.uniform() < spec.rel_outlier_fraction:
                t_ij = rng.standard_normal(3)
                t_ij /= np.linalg.norm(t_ij)
            E = essential_from_pose(R_ij, t_ij)
            if prior_intr[i].calibrated and prior_intr[j].calibrated:
                edge = TwoViewGeometry(i, j, CALIBRATED, E, matches, R_ij, t_ij)
            else:
                F = fundamental_from_essential(E, true_intr[i], true_intr[j])
                edge = TwoViewGeometry(i, j, UNCALIBRATED, F, matches, R_ij, t_ij)
            edge_list.append(edge)

    # corrupt an exact count of matches with wrong pairings
    n_matches = sum(len(e.matches) for e in edge_list)
    n_corrupt = int(spec.outlier_fraction * n_matches)
    if n_corrupt > 0:
        flat = []
        for e_idx, e in enumerate(edge_list):
            flat.extend((e_idx, m) for m in range(len(e.matches)))
        chosen = rng.choice(len(flat), size=n_corrupt, replace=False)
        for c in sorted(chosen.tolist()):
            e_idx, m = flat[c]
            edge = edge_list[e_idx]
            n_feat_j = len(obs_uv[edge.j])
            if n_feat_j < 2:
                continue
            current = edge.matches[m, 1]
            new = int(rng.integers(0, n_feat_j - 1))
            if new >= current:
                new += 1
            edge.matches[m, 1] = new

    for e in edge_list:
        graph.add_edge(e)

    # ground-truth reconstruction with one track per point
    recon = Reconstruction()
    recon.cameras = dict(true_intr)
    for i in range(spec.n_cams):
        recon.images[i] = RecImage(
            i, i, f"synth_{i:04d}.png", spec.width, spec.height, poses[i], True
        )
    tracks = []
    for k in range(spec.n_points):
        obs = []
        for i in range(spec.n_cams):
            if k in feature_of[i]:
                f = feature_of[i][k]
                u, v = obs_uv[i][f]
                obs.append((i, f, Observation(i, float(u), float(v))))
        if len(obs) >= 2:
            tracks.append(Track(len(tracks), obs, point=points[k].copy()))
    recon.tracks = tracks

    feature_point = {i: obs_pt[i].copy() for i in range(spec.n_cams)}
    scene = SyntheticScene(spec, recon, true_intr, feature_point, n_matches, n_corrupt)
    if not edge_list:
        raise ValueError("layout produced no view-graph edges (scene infeasible)")
    return scene, graph
