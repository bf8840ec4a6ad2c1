"""Reconstruction state shared by positioning, bundle adjustment, and export."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .core import CameraIntrinsics, Pose, Rotation, project
from .viewgraph import Track


@dataclass
class RecImage:
    id: int
    camera_id: int
    name: str
    width: int
    height: int
    pose: Optional[Pose] = None
    registered: bool = False


@dataclass
class Reconstruction:
    images: Dict[int, RecImage] = field(default_factory=dict)
    cameras: Dict[int, CameraIntrinsics] = field(default_factory=dict)
    tracks: List[Track] = field(default_factory=list)

    def camera_of(self, image_id: int) -> CameraIntrinsics:
        return self.cameras[self.images[image_id].camera_id]

    def registered_ids(self) -> List[int]:
        return sorted(i for i, img in self.images.items() if img.registered)

    def live_tracks(self) -> List[Track]:
        """Tracks that still carry a point and at least two observations."""
        return [t for t in self.tracks if t.point is not None and len(t) >= 2]

    def deregister_track(self, track: Track) -> None:
        track.point = None

    def iter_observations(self) -> Iterator[Tuple[Track, int, int]]:
        """Yields (track, obs index, image id) over live tracks with the
        observation's image registered."""
        for track in self.live_tracks():
            for idx, (image_id, _feat, _obs) in enumerate(track.observations):
                if self.images[image_id].registered:
                    yield track, idx, image_id

    def reprojection_errors(self) -> np.ndarray:
        """Pixel reprojection errors over all live, registered observations;
        behind-camera observations contribute +inf."""
        errs = []
        for track, idx, image_id in self.iter_observations():
            img = self.images[image_id]
            intr = self.cameras[img.camera_id]
            uv, ok = project(intr, img.pose, track.point)
            _, _, obs = track.observations[idx]
            if not ok:
                errs.append(np.inf)
            else:
                errs.append(float(np.linalg.norm(uv - obs.uv())))
        return np.asarray(errs)

    def mean_reprojection_error(self) -> float:
        errs = self.reprojection_errors()
        finite = errs[np.isfinite(errs)]
        return float(np.mean(finite)) if len(finite) else float("nan")

    def centers(self) -> Dict[int, np.ndarray]:
        return {
            i: img.pose.center
            for i, img in self.images.items()
            if img.registered and img.pose is not None
        }

    def diameter(self) -> float:
        """Largest pairwise camera-center distance (scene scale proxy)."""
        pts = np.stack(list(self.centers().values())) if self.centers() else np.zeros((0, 3))
        if len(pts) < 2:
            return 0.0
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        return float(np.sqrt(d2.max()))
