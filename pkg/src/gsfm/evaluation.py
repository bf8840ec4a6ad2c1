"""Robust similarity alignment against ground truth and AUC metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import Rotation, angular_distance


class AlignmentError(ValueError):
    pass


@dataclass
class Similarity:
    scale: float
    rotation: Rotation
    translation: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return self.scale * (pts @ self.rotation.matrix().T) + self.translation


@dataclass
class AlignmentResult:
    transform: Similarity
    inlier_ids: List[int]
    errors: Dict[int, float]  # per-camera position error after alignment

    def max_error(self) -> float:
        return max(self.errors.values())

    def median_error(self) -> float:
        return float(np.median(list(self.errors.values())))


def umeyama_similarity(src: np.ndarray, dst: np.ndarray) -> Similarity:
    """Least-squares similarity with s > 0 mapping src onto dst."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d
    cov = dc.T @ sc / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var = float(np.sum(sc * sc)) / len(src)
    if var <= 0:
        raise AlignmentError("degenerate source points (zero variance)")
    s = float(np.trace(np.diag(D) @ S)) / var
    if s <= 0:
        raise AlignmentError("non-positive similarity scale")
    t = mu_d - s * (R @ mu_s)
    return Similarity(s, Rotation.from_matrix(R), t)


def align_robust(
    estimate: Mapping[int, np.ndarray],
    ground_truth: Mapping[int, np.ndarray],
    inlier_threshold: float,
    seed: int = 0,
    max_samples: int = 200,
) -> AlignmentResult:
    """RANSAC over 3-camera minimal samples, refit on the consensus set.

    Cameras present in both mappings participate; the reported per-camera
    errors cover all common cameras (inliers and outliers alike).
    """
    common = sorted(set(estimate) & set(ground_truth))
    if len(common) < 3:
        raise AlignmentError(f"need at least 3 common registered images, got {len(common)}")
    est = np.stack([np.asarray(estimate[i], dtype=float) for i in common])
    gt = np.stack([np.asarray(ground_truth[i], dtype=float) for i in common])

    rng = np.random.default_rng(seed)
    n = len(common)
    all_triples = list(combinations(range(n), 3))
    if len(all_triples) <= max_samples:
        samples = all_triples
    else:
        idx = rng.choice(len(all_triples), size=max_samples, replace=False)
        samples = [all_triples[k] for k in sorted(idx.tolist())]

    best: Optional[Tuple[int, float, np.ndarray]] = None
    for sample in samples:
        sel = list(sample)
        try:
            model = umeyama_similarity(est[sel], gt[sel])
        except AlignmentError:
            continue
        errs = np.linalg.norm(model.apply(est) - gt, axis=1)
        inliers = errs < inlier_threshold
        count = int(inliers.sum())
        mean_err = float(errs[inliers].mean()) if count else math.inf
        if best is None or (count, -mean_err) > (best[0], -best[1]):
            best = (count, mean_err, inliers)
    if best is None or best[0] < 3:
        # no sample produced a consensus; fall back to all-point fit
        inliers = np.ones(n, dtype=bool)
    else:
        inliers = best[2]

    model = umeyama_similarity(est[inliers], gt[inliers])
    errs = np.linalg.norm(model.apply(est) - gt, axis=1)
    errors = {common[k]: float(errs[k]) for k in range(n)}
    inlier_ids = [common[k] for k in range(n) if errs[k] < inlier_threshold]
    return AlignmentResult(model, inlier_ids, errors)


def auc(errors: Sequence[float], threshold: float) -> float:
    """Area under the recall curve up to `threshold`, normalized to [0, 1].

    recall(x) is the fraction of errors <= x; the integral is evaluated
    exactly on the piecewise-constant curve. Unregistered cameras enter as
    +inf errors and only lower the curve.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    errs = np.asarray(list(errors), dtype=float)
    if errs.size == 0:
        raise ValueError("empty error list")
    inside = errs[errs <= threshold]
    if inside.size == 0:
        return 0.0
    return float(np.sum(threshold - inside) / (threshold * errs.size))


def chordal_mean(rotations: Iterable[Rotation]) -> Rotation:
    """Quaternion-eigenvector mean of rotations (Markley's method)."""
    M = np.zeros((4, 4))
    count = 0
    for r in rotations:
        q = r.q
        M += np.outer(q, q)
        count += 1
    if count == 0:
        raise ValueError("no rotations to average")
    _, vecs = np.linalg.eigh(M)
    q = vecs[:, -1]
    return Rotation.from_quat(q)


def align_rotations(
    estimate: Mapping[int, Rotation], ground_truth: Mapping[int, Rotation]
) -> Dict[int, float]:
    """Per-camera angular errors after removing the global gauge rotation.

    World->camera rotations transform as R_i -> R_i * G under a world gauge
    G; the gauge is estimated as the chordal mean of the per-camera
    candidates R_gt_i^-1 * R_est_i, and errors are reported against the
    gauge-aligned ground truth.
    """
    common = sorted(set(estimate) & set(ground_truth))
    if not common:
        raise ValueError("no common cameras")
    candidates = [ground_truth[i].inverse() * estimate[i] for i in common]
    G = chordal_mean(candidates)
    return {
        i: angular_distance(estimate[i], ground_truth[i] * G) for i in common
    }
