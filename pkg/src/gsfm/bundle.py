"""Staged global bundle adjustment with angular pre-filtering and
reprojection-based track filtering between rounds.

Each round first solves with camera rotations fixed (stage A: centers,
intrinsics, points free), then with rotations free as well (stage B).
Calibrated intrinsics never move; uncalibrated cameras refine focal length
(plus the radial coefficient for the radial model). Principal points are
never optimized. Rounds stop once the fraction of tracks removed by the
reprojection filter drops below the configured ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .core import (
    PINHOLE,
    SIMPLE_RADIAL,
    CameraIntrinsics,
    Pose,
    Rotation,
    project,
    ray_directions,
)
from .reconstruction import Reconstruction
from .solver import ROTATION, HuberLoss, Problem, SolverOptions, SolverReport, solve


@dataclass
class BaConfig:
    max_rounds: int = 5
    huber_px: float = 1.0
    prefilter_deg_calibrated: float = 1.0
    prefilter_deg_uncalibrated: float = 2.0
    reproj_filter_px: float = 4.0
    stop_ratio: float = 0.001
    max_iters_per_stage: int = 100

    def __post_init__(self):
        if min(
            self.huber_px,
            self.prefilter_deg_calibrated,
            self.prefilter_deg_uncalibrated,
            self.reproj_filter_px,
        ) <= 0:
            raise ValueError("all thresholds must be positive")
        if not (0.0 < self.stop_ratio < 1.0):
            raise ValueError("stop ratio must be in (0, 1)")


def prefilter_observations(recon: Reconstruction, config: BaConfig) -> int:
    """Drop observations whose world ray disagrees with the point direction
    by more than the angular threshold (larger for uncalibrated cameras).
    Returns the number of observations removed."""
    removed = 0
    for track in recon.live_tracks():
        keep = []
        for entry in track.observations:
            image_id, _feat, obs = entry
            img = recon.images[image_id]
            if not img.registered or img.pose is None:
                keep.append(entry)
                continue
            intr = recon.cameras[img.camera_id]
            limit = math.radians(
                config.prefilter_deg_calibrated
                if intr.calibrated
                else config.prefilter_deg_uncalibrated
            )
            ray_cam = ray_directions(intr, [[obs.u, obs.v]])[0]
            v = img.pose.rotation.inverse().apply(ray_cam)
            u = track.point - img.pose.center
            nu = np.linalg.norm(u)
            if nu == 0.0:
                removed += 1
                continue
            cos_a = float(np.clip(np.dot(v, u) / nu, -1.0, 1.0))
            if math.acos(cos_a) > limit:
                removed += 1
            else:
                keep.append(entry)
        track.observations = keep
        if len(track) < 2:
            recon.deregister_track(track)
    return removed


def filter_by_reprojection(recon: Reconstruction, threshold_px: float = 4.0) -> int:
    """Remove observations reprojecting beyond the threshold or behind the
    camera; deregister tracks left with fewer than two observations.
    Returns the number of tracks removed (for the stop rule)."""
    removed_tracks = 0
    for track in recon.live_tracks():
        keep = []
        for entry in track.observations:
            image_id, _feat, obs = entry
            img = recon.images[image_id]
            if not img.registered or img.pose is None:
                keep.append(entry)
                continue
            intr = recon.cameras[img.camera_id]
            uv, ok = project(intr, img.pose, track.point)
            if not ok or np.linalg.norm(uv - obs.uv()) > threshold_px:
                continue
            keep.append(entry)
        track.observations = keep
        if len(track) < 2:
            recon.deregister_track(track)
            removed_tracks += 1
    return removed_tracks


def _intrinsics_block(intr: CameraIntrinsics) -> np.ndarray:
    if intr.model == SIMPLE_RADIAL:
        return np.array([intr.fx, intr.fy, intr.k1])
    return np.array([intr.fx, intr.fy])


def _intrinsics_from_block(intr: CameraIntrinsics, block: np.ndarray) -> CameraIntrinsics:
    if intr.model == SIMPLE_RADIAL:
        return CameraIntrinsics(
            intr.model, block[0], block[1], intr.cx, intr.cy, block[2], intr.calibrated
        )
    return CameraIntrinsics(
        intr.model, block[0], block[1], intr.cx, intr.cy, 0.0, intr.calibrated
    )


def _reprojection_callback(measured: np.ndarray, principal: np.ndarray, radial: bool):
    """Vectorized reprojection residual for one camera-model family.

    Parameter slots: quaternion (ROTATION), center (3), intrinsics block
    (2 or 3), point (3). Constant arrays give per-row measurement and
    principal point.
    """

    def fn(q, c, k, x):
        n = len(q)
        uv0 = measured[:n]
        cc = principal[:n]
        # rotation matrices from quaternions, batched
        w, qx, qy, qz = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
        R = np.empty((n, 3, 3))
        R[:, 0, 0] = 1 - 2 * (qy * qy + qz * qz)
        R[:, 0, 1] = 2 * (qx * qy - w * qz)
        R[:, 0, 2] = 2 * (qx * qz + w * qy)
        R[:, 1, 0] = 2 * (qx * qy + w * qz)
        R[:, 1, 1] = 1 - 2 * (qx * qx + qz * qz)
        R[:, 1, 2] = 2 * (qy * qz - w * qx)
        R[:, 2, 0] = 2 * (qx * qz - w * qy)
        R[:, 2, 1] = 2 * (qy * qz + w * qx)
        R[:, 2, 2] = 1 - 2 * (qx * qx + qy * qy)

        diff = x - c
        p = np.einsum("nij,nj->ni", R, diff)
        z = p[:, 2]
        z_safe = np.where(np.abs(z) < 1e-12, np.where(z >= 0, 1e-12, -1e-12), z)
        xn = p[:, :2] / z_safe[:, None]

        fx, fy = k[:, 0], k[:, 1]
        if radial:
            k1 = k[:, 2]
            r2 = np.sum(xn * xn, axis=1)
            s = 1.0 + k1 * r2
            xd = xn * s[:, None]
        else:
            xd = xn
        uv = np.empty((n, 2))
        uv[:, 0] = fx * xd[:, 0] + cc[:, 0]
        uv[:, 1] = fy * xd[:, 1] + cc[:, 1]
        res = uv - uv0

        # d p / d omega = -R [diff]_x  (right-multiplicative tangent)
        cross = np.zeros((n, 3, 3))
        cross[:, 0, 1] = -diff[:, 2]
        cross[:, 0, 2] = diff[:, 1]
        cross[:, 1, 0] = diff[:, 2]
        cross[:, 1, 2] = -diff[:, 0]
        cross[:, 2, 0] = -diff[:, 1]
        cross[:, 2, 1] = diff[:, 0]
        dp_dw = -np.einsum("nij,njk->nik", R, cross)
        dp_dc = -R
        dp_dx = R

        # d xn / d p
        dxn_dp = np.zeros((n, 2, 3))
        inv_z = 1.0 / z_safe
        dxn_dp[:, 0, 0] = inv_z
        dxn_dp[:, 1, 1] = inv_z
        dxn_dp[:, 0, 2] = -p[:, 0] * inv_z * inv_z
        dxn_dp[:, 1, 2] = -p[:, 1] * inv_z * inv_z

        # d xd / d xn and d uv / d (fx, fy[, k1])
        if radial:
            dxd_dxn = s[:, None, None] * np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
            outer = 2.0 * k1[:, None, None] * np.einsum("ni,nj->nij", xn, xn)
            dxd_dxn = dxd_dxn + outer
        else:
            dxd_dxn = np.broadcast_to(np.eye(2), (n, 2, 2))

        f = np.stack([fx, fy], axis=1)
        duv_dxd = f[:, :, None] * np.broadcast_to(np.eye(2), (n, 2, 2))
        duv_dp = np.einsum("nab,nbc,ncd->nad", duv_dxd, dxd_dxn, dxn_dp)

        Jq = np.einsum("nab,nbc->nac", duv_dp, dp_dw)
        Jc = np.einsum("nab,nbc->nac", duv_dp, dp_dc)
        Jx = np.einsum("nab,nbc->nac", duv_dp, dp_dx)

        kdim = 3 if radial else 2
        Jk = np.zeros((n, 2, kdim))
        Jk[:, 0, 0] = xd[:, 0]
        Jk[:, 1, 1] = xd[:, 1]
        if radial:
            dr2 = r2  # d xd / d k1 = r^2 * xn
            Jk[:, 0, 2] = fx * dr2 * xn[:, 0]
            Jk[:, 1, 2] = fy * dr2 * xn[:, 1]
        return res, [Jq, Jc, Jk, Jx]

    return fn


def build_ba_problem(
    recon: Reconstruction, config: BaConfig
) -> Tuple[Problem, List[int], Dict[int, int], List]:
    """Problem over registered poses, uncalibrated intrinsics, and live
    points. Returns (problem, image ids, track index map, track list)."""
    p = Problem()
    image_ids = recon.registered_ids()
    for image_id in image_ids:
        img = recon.images[image_id]
        p.add_parameter_block(f"q{image_id}", img.pose.rotation.q, manifold=ROTATION)
        p.add_parameter_block(f"c{image_id}", img.pose.center)
    for cam_id in sorted(recon.cameras):
        intr = recon.cameras[cam_id]
        p.add_parameter_block(f"k{cam_id}", _intrinsics_block(intr), fixed=intr.calibrated)

    tracks = recon.live_tracks()
    track_index: Dict[int, int] = {}
    rows_by_radial: Dict[bool, List[Tuple[np.ndarray, np.ndarray, List[str]]]] = {
        False: [],
        True: [],
    }
    registered = set(image_ids)
    for t_idx, track in enumerate(tracks):
        p.add_parameter_block(f"x{track.track_id}", track.point)
        track_index[track.track_id] = t_idx
        for image_id, _feat, obs in track.observations:
            if image_id not in registered:
                continue
            intr = recon.camera_of(image_id)
            radial = intr.model == SIMPLE_RADIAL
            rows_by_radial[radial].append(
                (
                    obs.uv(),
                    np.array([intr.cx, intr.cy]),
                    [
                        f"q{image_id}",
                        f"c{image_id}",
                        f"k{recon.images[image_id].camera_id}",
                        f"x{track.track_id}",
                    ],
                )
            )
    for radial, rows in rows_by_radial.items():
        if not rows:
            continue
        measured = np.stack([r[0] for r in rows])
        principal = np.stack([r[1] for r in rows])
        fn = _reprojection_callback(measured, principal, radial)
        for _, _, names in rows:
            p.add_residual_block(fn, names, 2, loss=HuberLoss(config.huber_px))
    return p, image_ids, track_index, tracks


def _write_back(p: Problem, recon: Reconstruction, image_ids, tracks) -> None:
    for image_id in image_ids:
        img = recon.images[image_id]
        q = p.values(f"q{image_id}")
        c = p.values(f"c{image_id}")
        img.pose = Pose(Rotation.from_quat(q), c)
    for cam_id in sorted(recon.cameras):
        intr = recon.cameras[cam_id]
        if not intr.calibrated:
            recon.cameras[cam_id] = _intrinsics_from_block(intr, p.values(f"k{cam_id}"))
    for track in tracks:
        track.point = p.values(f"x{track.track_id}")


def run_global_ba(
    recon: Reconstruction, config: "BaConfig | None" = None
) -> List[SolverReport]:
    """Rounds of (stage A: rotations fixed) then (stage B: rotations free),
    with reprojection filtering after each round."""
    config = config or BaConfig()
    reports: List[SolverReport] = []
    for _ in range(config.max_rounds):
        n_before = len(recon.live_tracks())
        if n_before == 0:
            break
        p, image_ids, _tindex, tracks = build_ba_problem(recon, config)
        options = SolverOptions(max_iters=config.max_iters_per_stage, fn_tol=1e-14)

        # stage A: rotations fixed
        for image_id in image_ids:
            p.set_fixed(f"q{image_id}", True)
        report_a = solve(p, options)
        if report_a.termination == "FAILURE":
            raise RuntimeError(f"bundle stage A failed: {report_a.message}")
        reports.append(report_a)

        # stage B: rotations free
        for image_id in image_ids:
            p.set_fixed(f"q{image_id}", False)
        report_b = solve(p, options)
        if report_b.termination == "FAILURE":
            raise RuntimeError(f"bundle stage B failed: {report_b.message}")
        reports.append(report_b)

        _write_back(p, recon, image_ids, tracks)
        removed = filter_by_reprojection(recon, config.reproj_filter_px)
        if removed / max(n_before, 1) < config.stop_ratio:
            break
    return reports
