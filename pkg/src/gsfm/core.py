"""Shared geometric types and elementary camera-geometry operations.

Conventions fixed repo-wide:
  * Rotations are unit quaternions (w, x, y, z), canonicalized so w >= 0
    (and if w == 0, the first nonzero of x, y, z is >= 0).
  * A pose is a world->camera rotation plus a camera center in world units.
    The camera-frame coordinates of a world point X are  R * (X - c).
  * Pixel coordinates (u, v) have the origin at the top-left corner.

Everything here is an immutable value type; all operations are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

PINHOLE = "PINHOLE"
SIMPLE_RADIAL = "SIMPLE_RADIAL"

_UNIT_TOL = 1e-9


class UndistortionError(RuntimeError):
    """Iterative undistortion failed to converge (absurd distortion)."""


def _canonical(q: np.ndarray) -> np.ndarray:
    """Normalize and pick the w >= 0 representative of the double cover."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    if q[0] < 0.0:
        q = -q
    elif q[0] == 0.0:
        for v in q[1:]:
            if v != 0.0:
                if v < 0.0:
                    q = -q
                break
    return q


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion (w, x, y, z), canonicalized to w >= 0."""

    q: np.ndarray

    def __init__(self, w: float, x: float, y: float, z: float):
        object.__setattr__(self, "q", _canonical(np.array([w, x, y, z])))
        self.q.setflags(write=False)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_quat(q: np.ndarray) -> "Rotation":
        q = np.asarray(q, dtype=float)
        return Rotation(q[0], q[1], q[2], q[3])

    @staticmethod
    def from_axis_angle(axis, angle_rad: float) -> "Rotation":
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0.0:
            return Rotation.identity()
        axis = axis / n
        half = 0.5 * angle_rad
        s = math.sin(half)
        return Rotation(math.cos(half), s * axis[0], s * axis[1], s * axis[2])

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Rotation":
        """Shepperd's method: stable for all rotation matrices."""
        m = np.asarray(m, dtype=float)
        t = np.trace(m)
        if t > 0.0:
            r = math.sqrt(1.0 + t)
            s = 0.5 / r
            q = np.array(
                [0.5 * r, (m[2, 1] - m[1, 2]) * s, (m[0, 2] - m[2, 0]) * s, (m[1, 0] - m[0, 1]) * s]
            )
        else:
            i = int(np.argmax(np.diag(m)))
            j, k = (i + 1) % 3, (i + 2) % 3
            r = math.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
            s = 0.5 / r
            q = np.empty(4)
            q[0] = (m[k, j] - m[j, k]) * s
            q[1 + i] = 0.5 * r
            q[1 + j] = (m[j, i] + m[i, j]) * s
            q[1 + k] = (m[k, i] + m[i, k]) * s
        return Rotation.from_quat(q)

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def inverse(self) -> "Rotation":
        w, x, y, z = self.q
        return Rotation(w, -x, -y, -z)

    def compose(self, other: "Rotation") -> "Rotation":
        """Hamilton product self * other (apply `other` first)."""
        w1, x1, y1, z1 = self.q
        w2, x2, y2, z2 = other.q
        return Rotation(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def __mul__(self, other: "Rotation") -> "Rotation":
        return self.compose(other)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Rotate vector(s); v may be (3,) or (n, 3)."""
        return np.asarray(v, dtype=float) @ self.matrix().T

    def allclose(self, other: "Rotation", tol: float = 1e-9) -> bool:
        return bool(np.allclose(self.q, other.q, atol=tol))


def angular_distance(a: Rotation, b: Rotation) -> float:
    """Geodesic angle between two rotations, in [0, pi]. Symmetric.

    atan2 of the relative quaternion keeps full precision near zero, where
    the acos-of-dot formulation bottoms out around 1e-8.
    """
    rel = a * b.inverse()
    w = abs(float(rel.q[0]))
    s = float(np.linalg.norm(rel.q[1:]))
    return 2.0 * math.atan2(s, w)


def log_map(r: Rotation) -> np.ndarray:
    """Axis-angle vector of a rotation; norm in [0, pi].

    Uses a series branch near zero and an atan2-based branch elsewhere,
    which stays accurate for angles approaching pi.
    """
    w = float(r.q[0])
    v = np.asarray(r.q[1:], dtype=float)
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        # theta ~ 2 s / w; first-order series of 2*atan2(s, w)/s
        return 2.0 / max(w, 1e-300) * v
    theta = 2.0 * math.atan2(s, w)
    return (theta / s) * v


def exp_map(omega: np.ndarray) -> Rotation:
    """Inverse of log_map: axis-angle vector to rotation."""
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    if theta < 1e-12:
        half = omega * 0.5
        return Rotation(1.0, half[0], half[1], half[2])
    axis = omega / theta
    half = 0.5 * theta
    s = math.sin(half)
    return Rotation(math.cos(half), s * axis[0], s * axis[1], s * axis[2])


@dataclass(frozen=True, eq=False)
class Pose:
    """World->camera rotation plus camera center (world units)."""

    rotation: Rotation
    center: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        self.center.setflags(write=False)

    def world_to_camera(self, X: np.ndarray) -> np.ndarray:
        return self.rotation.apply(np.asarray(X, dtype=float) - self.center)

    def translation(self) -> np.ndarray:
        """t = -R * c, the translation of the (R | t) convention."""
        return -self.rotation.apply(self.center)

    @staticmethod
    def from_rt(rotation: Rotation, t: np.ndarray) -> "Pose":
        return Pose(rotation, -rotation.inverse().apply(np.asarray(t, dtype=float)))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole or single-coefficient radial camera.

    `calibrated` marks intrinsics that come from a trusted prior; bundle
    adjustment keeps those fixed and refines the rest.
    """

    model: str
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    calibrated: bool = True

    def __post_init__(self):
        if self.model not in (PINHOLE, SIMPLE_RADIAL):
            raise ValueError(f"unknown camera model {self.model!r}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.model == PINHOLE and self.k1 != 0.0:
            raise ValueError("PINHOLE does not take a distortion coefficient")

    def k_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Observation:
    """One 2D detection: pixel coordinates in an image."""

    image_id: int
    u: float
    v: float

    def uv(self) -> np.ndarray:
        return np.array([self.u, self.v])


def distort(intr: CameraIntrinsics, xn: np.ndarray) -> np.ndarray:
    """Apply the model's distortion to normalized coordinates (n, 2)."""
    xn = np.atleast_2d(np.asarray(xn, dtype=float))
    if intr.model == PINHOLE:
        return xn
    r2 = np.sum(xn * xn, axis=1, keepdims=True)
    return xn * (1.0 + intr.k1 * r2)


def undistort(intr: CameraIntrinsics, xd: np.ndarray, max_iters: int = 100) -> np.ndarray:
    """Invert `distort` by fixed-point iteration (exact for PINHOLE)."""
    xd = np.atleast_2d(np.asarray(xd, dtype=float))
    if intr.model == PINHOLE:
        return xd
    xn = xd.copy()
    for _ in range(max_iters):
        r2 = np.sum(xn * xn, axis=1, keepdims=True)
        xn_new = xd / (1.0 + intr.k1 * r2)
        if np.max(np.abs(xn_new - xn)) < 1e-12:
            return xn_new
        xn = xn_new
    residual = np.max(np.abs(distort(intr, xn) - xd))
    if residual > 1e-8:
        raise UndistortionError(
            f"undistortion did not converge after {max_iters} iterations (k1={intr.k1})"
        )
    return xn


def project(
    intr: CameraIntrinsics, pose: Pose, X: np.ndarray
) -> Tuple[Optional[np.ndarray], bool]:
    """Project a world point. Returns (pixel, True) or (None, False) if the
    point is at or behind the camera plane."""
    p = pose.world_to_camera(X)
    if p[2] <= 0.0:
        return None, False
    xn = p[:2] / p[2]
    xd = distort(intr, xn)[0]
    uv = np.array([intr.fx * xd[0] + intr.cx, intr.fy * xd[1] + intr.cy])
    return uv, True


def project_many(
    intr: CameraIntrinsics, pose: Pose, X: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (n, 3) world points.

    Returns (pixels (n, 2), in_front (n,) bool); pixels of behind-camera
    points are NaN.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    p = (X - pose.center) @ pose.rotation.matrix().T
    in_front = p[:, 2] > 0.0
    z = np.where(in_front, p[:, 2], np.nan)
    xn = p[:, :2] / z[:, None]
    xd = distort(intr, xn)
    uv = np.empty_like(xd)
    uv[:, 0] = intr.fx * xd[:, 0] + intr.cx
    uv[:, 1] = intr.fy * xd[:, 1] + intr.cy
    return uv, in_front


def ray_direction(intr: CameraIntrinsics, obs: Observation) -> np.ndarray:
    """Unit viewing ray in the camera frame for a pixel observation."""
    xd = np.array([[(obs.u - intr.cx) / intr.fx, (obs.v - intr.cy) / intr.fy]])
    xn = undistort(intr, xd)[0]
    ray = np.array([xn[0], xn[1], 1.0])
    return ray / np.linalg.norm(ray)


def ray_directions(intr: CameraIntrinsics, uv: np.ndarray) -> np.ndarray:
    """Vectorized `ray_direction` for (n, 2) pixels; returns (n, 3) units."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    xd = np.empty_like(uv)
    xd[:, 0] = (uv[:, 0] - intr.cx) / intr.fx
    xd[:, 1] = (uv[:, 1] - intr.cy) / intr.fy
    xn = undistort(intr, xd)
    rays = np.concatenate([xn, np.ones((len(xn), 1))], axis=1)
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)
