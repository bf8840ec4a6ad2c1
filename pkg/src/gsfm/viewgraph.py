"""View graph: pairwise two-view geometries, per-pair filters, feature tracks.

Relative pose convention: for an edge (i, j), a point with camera-i
coordinates p_i has camera-j coordinates  p_j = R_ij * p_i + t_ij, with
t_ij normalized to unit length. The essential matrix is E = [t_ij]_x R_ij
with the epipolar constraint x_j^T E x_i = 0 on normalized image points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import CameraIntrinsics, Observation, Rotation, ray_directions

HOMOGRAPHY = "HOMOGRAPHY"
CALIBRATED = "CALIBRATED"
UNCALIBRATED = "UNCALIBRATED"

MIN_EDGE_MATCHES = 15
MIN_CHEIRALITY_RATIO = 0.5


class ViewGraphError(ValueError):
    pass


@dataclass
class TwoViewGeometry:
    """One verified image pair: model matrix, matches, optional decomposition."""

    i: int
    j: int
    config: str
    matrix: np.ndarray
    matches: np.ndarray  # (n, 2) feature indices, columns (idx_i, idx_j)
    rotation: Optional[Rotation] = None  # R_ij, present iff decomposed
    direction: Optional[np.ndarray] = None  # unit t_ij, present iff decomposed
    valid: bool = True

    def __post_init__(self):
        if self.config not in (HOMOGRAPHY, CALIBRATED, UNCALIBRATED):
            raise ViewGraphError(f"unknown two-view config {self.config!r}")
        self.matrix = np.asarray(self.matrix, dtype=float).reshape(3, 3)
        self.matches = np.asarray(self.matches, dtype=np.int64).reshape(-1, 2)
        if self.direction is not None:
            self.direction = np.asarray(self.direction, dtype=float).reshape(3)
            n = np.linalg.norm(self.direction)
            if abs(n - 1.0) > 1e-9:
                self.direction = self.direction / n

    @property
    def pair(self) -> Tuple[int, int]:
        return (self.i, self.j)


@dataclass
class ImageInfo:
    id: int
    camera_id: int
    name: str
    width: int
    height: int
    features: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ViewGraphError(f"image {self.id}: width/height must be positive")
        self.features = np.asarray(self.features, dtype=float).reshape(-1, 2)


@dataclass
class ViewGraph:
    images: Dict[int, ImageInfo] = field(default_factory=dict)
    cameras: Dict[int, CameraIntrinsics] = field(default_factory=dict)
    edges: Dict[Tuple[int, int], TwoViewGeometry] = field(default_factory=dict)

    def add_image(self, image: ImageInfo) -> None:
        if image.id in self.images:
            raise ViewGraphError(f"duplicate image id {image.id}")
        if image.camera_id not in self.cameras:
            raise ViewGraphError(f"image {image.id} references unknown camera {image.camera_id}")
        self.images[image.id] = image

    def add_edge(self, edge: TwoViewGeometry) -> None:
        if edge.i == edge.j:
            raise ViewGraphError(f"self-edge on image {edge.i}")
        key = (min(edge.i, edge.j), max(edge.i, edge.j))
        if key in self.edges:
            raise ViewGraphError(f"duplicate edge for pair {key}")
        for idx in (edge.i, edge.j):
            if idx not in self.images:
                raise ViewGraphError(f"edge references unknown image {idx}")
        self.edges[key] = edge

    def camera_of(self, image_id: int) -> CameraIntrinsics:
        return self.cameras[self.images[image_id].camera_id]

    def num_matches(self) -> int:
        return sum(len(e.matches) for e in self.edges.values() if e.valid)


TrackObs = Tuple[int, int, Observation]  # (image id, feature index, observation)


@dataclass
class Track:
    """One 3D point's observations across images (one per image)."""

    track_id: int
    observations: List[TrackObs]
    point: Optional[np.ndarray] = None
    color: Optional[Tuple[int, int, int]] = None

    def image_ids(self) -> List[int]:
        return [obs[0] for obs in self.observations]

    def __len__(self) -> int:
        return len(self.observations)


# ---------------------------------------------------------------------------
# per-pair filters


def _gather_pixels(
    matches: np.ndarray, features_i: np.ndarray, features_j: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    features_i = np.asarray(features_i, dtype=float).reshape(-1, 2)
    features_j = np.asarray(features_j, dtype=float).reshape(-1, 2)
    if len(matches) and (
        matches[:, 0].max(initial=-1) >= len(features_i)
        or matches[:, 1].max(initial=-1) >= len(features_j)
        or matches.min(initial=0) < 0
    ):
        raise ViewGraphError("match references a feature index outside the feature list")
    return features_i[matches[:, 0]], features_j[matches[:, 1]]


def _homogeneous(px: np.ndarray) -> np.ndarray:
    return np.concatenate([px, np.ones((len(px), 1))], axis=1)


def sampson_distance(F: np.ndarray, px_i: np.ndarray, px_j: np.ndarray) -> np.ndarray:
    """First-order geometric distance to the epipolar constraint, in pixels."""
    x_i = _homogeneous(px_i)
    x_j = _homogeneous(px_j)
    Fx_i = x_i @ F.T
    Ftx_j = x_j @ F
    num = np.sum(x_j * Fx_i, axis=1)
    den = Fx_i[:, 0] ** 2 + Fx_i[:, 1] ** 2 + Ftx_j[:, 0] ** 2 + Ftx_j[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = num * num / den
    return np.sqrt(np.where(den > 0, d2, np.inf))


def homography_transfer_error(H: np.ndarray, px_i: np.ndarray, px_j: np.ndarray) -> np.ndarray:
    """Symmetric transfer error: max of forward and backward point distances."""
    Hinv = np.linalg.inv(H)
    fwd = _homogeneous(px_i) @ H.T
    bwd = _homogeneous(px_j) @ Hinv.T
    with np.errstate(divide="ignore", invalid="ignore"):
        fwd = fwd[:, :2] / fwd[:, 2:3]
        bwd = bwd[:, :2] / bwd[:, 2:3]
    d_fwd = np.linalg.norm(fwd - px_j, axis=1)
    d_bwd = np.linalg.norm(bwd - px_i, axis=1)
    err = np.maximum(d_fwd, d_bwd)
    return np.where(np.isfinite(err), err, np.inf)


def fundamental_from_essential(
    E: np.ndarray, intr_i: CameraIntrinsics, intr_j: CameraIntrinsics
) -> np.ndarray:
    Ki_inv = np.linalg.inv(intr_i.k_matrix())
    Kj_inv = np.linalg.inv(intr_j.k_matrix())
    return Kj_inv.T @ E @ Ki_inv


def essential_from_fundamental(
    F: np.ndarray, intr_i: CameraIntrinsics, intr_j: CameraIntrinsics
) -> np.ndarray:
    return intr_j.k_matrix().T @ F @ intr_i.k_matrix()


def verify_matches(
    edge: TwoViewGeometry,
    features_i: np.ndarray,
    features_j: np.ndarray,
    intr_i: CameraIntrinsics,
    intr_j: CameraIntrinsics,
    threshold_px: float = 4.0,
) -> TwoViewGeometry:
    """Re-verify matches against the pair's own model (H, E, or F).

    Keeps matches whose residual is at most `threshold_px`; drops the edge
    (valid=False, no matches) when fewer than MIN_EDGE_MATCHES survive.
    """
    px_i, px_j = _gather_pixels(edge.matches, features_i, features_j)
    if edge.config == HOMOGRAPHY:
        err = homography_transfer_error(edge.matrix, px_i, px_j)
    elif edge.config == CALIBRATED:
        F = fundamental_from_essential(edge.matrix, intr_i, intr_j)
        err = sampson_distance(F, px_i, px_j)
    else:
        err = sampson_distance(edge.matrix, px_i, px_j)
    keep = err <= threshold_px
    matches = edge.matches[keep]
    if len(matches) < MIN_EDGE_MATCHES:
        return replace(edge, matches=matches[:0], valid=False)
    return replace(edge, matches=matches)


def _midpoint_triangulate(
    rays_i: np.ndarray, rays_j: np.ndarray, R: np.ndarray, t: np.ndarray
) -> np.ndarray:
    """Midpoint triangulation in camera-i coordinates.

    Camera i sits at the origin; camera j's center is -R^T t; ray_j is
    rotated into frame i. Returns (n, 3) points (NaN for near-parallel rays).
    """
    o = -R.T @ t
    d1 = rays_i
    d2 = rays_j @ R  # R^T applied to each row
    b = o[None, :]
    d12 = np.sum(d1 * d2, axis=1)
    bd1 = np.sum(b * d1, axis=1)
    bd2 = np.sum(b * d2, axis=1)
    denom = 1.0 - d12 * d12
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (bd1 - d12 * bd2) / denom
        u = (d12 * bd1 - bd2) / denom
    p1 = d1 * s[:, None]
    p2 = b + d2 * u[:, None]
    X = 0.5 * (p1 + p2)
    return np.where(np.isfinite(X), X, np.nan)


def _cheirality_mask(
    rays_i: np.ndarray, rays_j: np.ndarray, R: np.ndarray, t: np.ndarray
) -> np.ndarray:
    X_i = _midpoint_triangulate(rays_i, rays_j, R, t)
    X_j = X_i @ R.T + t
    return (X_i[:, 2] > 0) & (X_j[:, 2] > 0) & np.all(np.isfinite(X_i), axis=1)


def decompose_essential(E: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """The four (R, t) candidates of an essential matrix."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    R1 = U @ W @ Vt
    R2 = U @ W.T @ Vt
    t = U[:, 2]
    t = t / np.linalg.norm(t)
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def decompose_homography(H: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Candidate (R, t, n) triples of a calibrated homography H = R + t n^T/d.

    Faugeras-style SVD decomposition; degenerate (pure-rotation) homographies
    return the polar-projected rotation with t = 0.
    """
    U, S, Vt = np.linalg.svd(H)
    # remove the projective scale: divide by the middle singular value
    H = H / S[1]
    s1, s2, s3 = S / S[1]
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        sign = -1.0
    else:
        sign = 1.0

    if s1 - s3 < 1e-9:
        # pure rotation (plane at infinity): project onto SO(3)
        Uh, _, Vth = np.linalg.svd(H)
        R = Uh @ np.diag([1.0, 1.0, np.linalg.det(Uh @ Vth)]) @ Vth
        return [(R, np.zeros(3), np.array([0.0, 0.0, 1.0]))]

    V = Vt.T
    a = math.sqrt(max(s1 * s1 - 1.0, 0.0))
    b = math.sqrt(max(1.0 - s3 * s3, 0.0))
    denom = math.sqrt(s1 * s1 - s3 * s3)
    x1 = a / denom
    x3 = b / denom
    solutions = []
    for e1, e3 in ((1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)):
        n = e1 * x1 * V[:, 0] + e3 * x3 * V[:, 2]
        st = (s1 - s3) * x1 * x3 * e1 * e3
        ct = s1 * x3 * x3 + s3 * x1 * x1
        # rotation about the V-frame y-axis
        Rp = np.array([[ct, 0.0, -st], [0.0, 1.0, 0.0], [st, 0.0, ct]])
        R = sign * U @ Rp @ Vt
        # H = R + t n^T (scale absorbed), so (H - R) n is parallel to t
        t = (H - R) @ n
        nt = np.linalg.norm(t)
        if nt > 1e-12:
            t = t / nt
        solutions.append((R, t, n))
    return solutions


def decompose_edge(
    edge: TwoViewGeometry,
    features_i: np.ndarray,
    features_j: np.ndarray,
    intr_i: CameraIntrinsics,
    intr_j: CameraIntrinsics,
) -> TwoViewGeometry:
    """Recover (R_ij, t_ij) and keep only cheirality-consistent matches.

    CALIBRATED edges decompose E directly; UNCALIBRATED edges promote F to E
    with the prior intrinsics first. HOMOGRAPHY edges contribute rotation
    only (their direction stays None). The edge is marked invalid when no
    candidate explains at least half of the matches.
    """
    px_i, px_j = _gather_pixels(edge.matches, features_i, features_j)
    rays_i = ray_directions(intr_i, px_i)
    rays_j = ray_directions(intr_j, px_j)

    if edge.config == HOMOGRAPHY:
        Hn = np.linalg.inv(intr_j.k_matrix()) @ edge.matrix @ intr_i.k_matrix()
        # fix the projective sign so that lambda x_j = H x_i has lambda > 0
        consistency = np.sum(rays_j * (rays_i @ Hn.T), axis=1)
        if np.median(consistency) < 0:
            Hn = -Hn
        candidates = decompose_homography(Hn)
        best = None
        for R, t, n in candidates:
            if np.linalg.norm(t) < 1e-12:
                # pure rotation: all matches trivially consistent
                count = len(edge.matches)
                mask = np.ones(len(edge.matches), dtype=bool)
                margin = 1.0
            else:
                visible = (rays_i @ n) > 0  # plane in front of camera i
                mask = _cheirality_mask(rays_i, rays_j, R, t) & visible
                count = int(mask.sum())
                margin = float(np.mean(rays_i @ n))
            # ties between the two plane interpretations go to the more
            # fronto-parallel plane (larger visibility margin)
            if best is None or (count, margin) > (best[0], best[1]):
                best = (count, margin, R, mask)
        count, _, R, mask = best
        if count < max(MIN_CHEIRALITY_RATIO * len(edge.matches), 1):
            return replace(edge, valid=False)
        return replace(
            edge,
            rotation=Rotation.from_matrix(R),
            direction=None,
            matches=edge.matches[mask],
        )

    if edge.config == CALIBRATED:
        E = edge.matrix
    else:
        E = essential_from_fundamental(edge.matrix, intr_i, intr_j)

    best = None
    for R, t in decompose_essential(E):
        mask = _cheirality_mask(rays_i, rays_j, R, t)
        count = int(mask.sum())
        if best is None or count > best[0]:
            best = (count, R, t, mask)
    count, R, t, mask = best
    if count < max(MIN_CHEIRALITY_RATIO * len(edge.matches), 1):
        return replace(edge, valid=False)
    return replace(
        edge,
        rotation=Rotation.from_matrix(R),
        direction=t,
        matches=edge.matches[mask],
    )


def filter_epipole_and_angle(
    edge: TwoViewGeometry,
    features_i: np.ndarray,
    features_j: np.ndarray,
    intr_i: CameraIntrinsics,
    intr_j: CameraIntrinsics,
    min_triangulation_angle_deg: float = 1.0,
    min_epipole_angle_deg: float = 1.0,
) -> TwoViewGeometry:
    """Drop matches near an epipole or with a small triangulation angle.

    The epipole test compares each ray against the baseline direction in its
    own camera frame (both signs); the triangulation angle is the angle the
    two rays subtend after rotating ray_i into frame j. Homography-only
    edges (no direction) pass through unchanged.
    """
    if not edge.valid or edge.rotation is None or edge.direction is None:
        return edge
    px_i, px_j = _gather_pixels(edge.matches, features_i, features_j)
    rays_i = ray_directions(intr_i, px_i)
    rays_j = ray_directions(intr_j, px_j)
    R = edge.rotation.matrix()
    t = edge.direction

    # baseline direction seen from each camera
    e_i = -R.T @ t  # camera j's center in frame i
    e_i = e_i / np.linalg.norm(e_i)
    e_j = t / np.linalg.norm(t)  # camera i's center in frame j

    min_ep = math.radians(min_epipole_angle_deg)
    min_tri = math.radians(min_triangulation_angle_deg)

    cos_i = np.abs(np.clip(rays_i @ e_i, -1.0, 1.0))
    cos_j = np.abs(np.clip(rays_j @ e_j, -1.0, 1.0))
    ang_i = np.arccos(cos_i)
    ang_j = np.arccos(cos_j)

    rot_i = rays_i @ R.T
    cos_tri = np.clip(np.sum(rot_i * rays_j, axis=1), -1.0, 1.0)
    tri = np.arccos(cos_tri)

    keep = (ang_i >= min_ep) & (ang_j >= min_ep) & (tri >= min_tri)
    return replace(edge, matches=edge.matches[keep])


# ---------------------------------------------------------------------------
# feature tracks


class UnionFind:
    def __init__(self):
        self.parent: Dict[Tuple[int, int], Tuple[int, int]] = {}
        self.rank: Dict[Tuple[int, int], int] = {}

    def find(self, x):
        parent = self.parent
        if x not in parent:
            parent[x] = x
            self.rank[x] = 0
            return x
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1


def build_tracks(graph: ViewGraph) -> List[Track]:
    """Concatenate surviving matches into feature tracks.

    Union-find over (image, feature) nodes; components with observations in
    at least two images become tracks. If a component holds two features of
    the same image, every observation from that image is dropped, and tracks
    shorter than 2 after dropping are discarded. Output is sorted by
    descending length with dense ids from 0.
    """
    uf = UnionFind()
    for key in sorted(graph.edges):
        edge = graph.edges[key]
        if not edge.valid:
            continue
        for fi, fj in edge.matches:
            uf.union((edge.i, int(fi)), (edge.j, int(fj)))

    components: Dict[Tuple[int, int], List[Tuple[int, int]]] = {}
    for node in uf.parent:
        components.setdefault(uf.find(node), []).append(node)

    tracks: List[Track] = []
    for nodes in components.values():
        per_image: Dict[int, List[int]] = {}
        for image_id, feat in nodes:
            per_image.setdefault(image_id, []).append(feat)
        kept = sorted(
            (img, feats[0]) for img, feats in per_image.items() if len(feats) == 1
        )
        if len(kept) < 2:
            continue
        observations: List[TrackObs] = []
        for image_id, feat in kept:
            u, v = graph.images[image_id].features[feat]
            observations.append((image_id, feat, Observation(image_id, float(u), float(v))))
        tracks.append(Track(-1, observations))

    tracks.sort(key=lambda t: (-len(t.observations), t.observations[0][:2]))
    for idx, track in enumerate(tracks):
        track.track_id = idx
    return tracks
