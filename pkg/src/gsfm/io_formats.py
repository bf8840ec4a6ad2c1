"""File formats: the view-graph text format, sparse-model text export, PLY.

View-graph format (UTF-8, '#' starts a comment):

    CAMERA <id> <MODEL> <w> <h> <params...> <calibrated:0|1>
    IMAGE <id> <camera_id> <name>
    FEATURES <image_id> <n>        followed by n lines "u v"
    PAIR <i> <j> <H|E|F> <9 matrix entries row-major> <n_matches>
                                   followed by n lines "idx_i idx_j"

PINHOLE params are fx fy cx cy; SIMPLE_RADIAL params are fx fy cx cy k1.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Dict, List, Optional, TextIO, Tuple, Union

import numpy as np

from .core import PINHOLE, SIMPLE_RADIAL, CameraIntrinsics, Pose, Rotation, project
from .reconstruction import Reconstruction
from .viewgraph import (
    CALIBRATED,
    HOMOGRAPHY,
    UNCALIBRATED,
    ImageInfo,
    TwoViewGeometry,
    ViewGraph,
    ViewGraphError,
)

_CONFIG_CODE = {HOMOGRAPHY: "H", CALIBRATED: "E", UNCALIBRATED: "F"}
_CODE_CONFIG = {v: k for k, v in _CONFIG_CODE.items()}


class ParseError(ValueError):
    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def _iter_lines(handle: TextIO):
    for line_no, raw in enumerate(handle, start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield line_no, line


def read_view_graph(path: Union[str, Path]) -> ViewGraph:
    """Parse the view-graph text format; errors carry line numbers."""
    path = Path(path)
    graph = ViewGraph()
    size_hint: Dict[int, Tuple[int, int]] = {}
    with open(path, "r", encoding="utf-8") as handle:
        lines = list(_iter_lines(handle))
    pos = 0

    def error(line_no, message):
        raise ParseError(str(path), line_no, message)

    while pos < len(lines):
        line_no, line = lines[pos]
        parts = line.split()
        kind = parts[0].upper()
        try:
            if kind == "CAMERA":
                cam_id = int(parts[1])
                model = parts[2].upper()
                w, h = int(parts[3]), int(parts[4])
                params = [float(x) for x in parts[5:-1]]
                calibrated = parts[-1] == "1"
                if model == PINHOLE and len(params) == 4:
                    intr = CameraIntrinsics(
                        PINHOLE, params[0], params[1], params[2], params[3],
                        calibrated=calibrated,
                    )
                elif model == SIMPLE_RADIAL and len(params) == 5:
                    intr = CameraIntrinsics(
                        SIMPLE_RADIAL, params[0], params[1], params[2], params[3],
                        params[4], calibrated=calibrated,
                    )
                else:
                    error(line_no, f"bad CAMERA model/params: {line}")
                if cam_id in graph.cameras:
                    error(line_no, f"duplicate camera id {cam_id}")
                if w <= 0 or h <= 0:
                    error(line_no, "camera image size must be positive")
                graph.cameras[cam_id] = intr
                size_hint[cam_id] = (w, h)
                pos += 1
            elif kind == "IMAGE":
                image_id = int(parts[1])
                cam_id = int(parts[2])
                name = parts[3] if len(parts) > 3 else f"image_{image_id}"
                if cam_id not in graph.cameras:
                    error(line_no, f"IMAGE references unknown camera {cam_id}")
                w, h = size_hint[cam_id]
                info = ImageInfo(image_id, cam_id, name, w, h)
                try:
                    graph.add_image(info)
                except ViewGraphError as exc:
                    error(line_no, str(exc))
                pos += 1
            elif kind == "FEATURES":
                image_id = int(parts[1])
                n = int(parts[2])
                if image_id not in graph.images:
                    error(line_no, f"FEATURES references unknown image {image_id}")
                feats = np.empty((n, 2))
                for k in range(n):
                    pos += 1
                    if pos >= len(lines):
                        error(line_no, "unexpected end of file inside FEATURES")
                    f_no, f_line = lines[pos]
                    vals = f_line.split()
                    if len(vals) != 2:
                        error(f_no, f"expected 'u v', got {f_line!r}")
                    feats[k] = [float(vals[0]), float(vals[1])]
                img = graph.images[image_id]
                if len(feats):
                    if (
                        feats[:, 0].min() < 0
                        or feats[:, 0].max() >= img.width
                        or feats[:, 1].min() < 0
                        or feats[:, 1].max() >= img.height
                    ):
                        error(line_no, f"feature outside image bounds for image {image_id}")
                img.features = feats
                pos += 1
            elif kind == "PAIR":
                i, j = int(parts[1]), int(parts[2])
                code = parts[3].upper()
                if code not in _CODE_CONFIG:
                    error(line_no, f"unknown pair config {code!r}")
                entries = [float(x) for x in parts[4:13]]
                if len(entries) != 9:
                    error(line_no, "PAIR needs 9 matrix entries")
                n = int(parts[13])
                matches = np.empty((n, 2), dtype=np.int64)
                for k in range(n):
                    pos += 1
                    if pos >= len(lines):
                        error(line_no, "unexpected end of file inside PAIR")
                    m_no, m_line = lines[pos]
                    vals = m_line.split()
                    if len(vals) != 2:
                        error(m_no, f"expected 'idx_i idx_j', got {m_line!r}")
                    matches[k] = [int(vals[0]), int(vals[1])]
                edge = TwoViewGeometry(
                    i, j, _CODE_CONFIG[code], np.array(entries).reshape(3, 3), matches
                )
                try:
                    graph.add_edge(edge)
                except ViewGraphError as exc:
                    error(line_no, str(exc))
                for fi, fj in matches:
                    if fi < 0 or fi >= len(graph.images[i].features):
                        error(line_no, f"match feature {fi} out of range for image {i}")
                    if fj < 0 or fj >= len(graph.images[j].features):
                        error(line_no, f"match feature {fj} out of range for image {j}")
                pos += 1
            else:
                error(line_no, f"unknown record {parts[0]!r}")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, ParseError):
                raise
            error(line_no, f"malformed line: {line!r} ({exc})")
    return graph


def write_view_graph(graph: ViewGraph, path: Union[str, Path]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as out:
        out.write("# view graph\n")
        for cam_id in sorted(graph.cameras):
            intr = graph.cameras[cam_id]
            owners = [im for im in graph.images.values() if im.camera_id == cam_id]
            size = (owners[0].width, owners[0].height) if owners else (1, 1)
            params = [intr.fx, intr.fy, intr.cx, intr.cy]
            if intr.model == SIMPLE_RADIAL:
                params.append(intr.k1)
            out.write(
                f"CAMERA {cam_id} {intr.model} {size[0]} {size[1]} "
                + " ".join(_fmt(p) for p in params)
                + f" {1 if intr.calibrated else 0}\n"
            )
        for image_id in sorted(graph.images):
            img = graph.images[image_id]
            out.write(f"IMAGE {image_id} {img.camera_id} {img.name}\n")
        for image_id in sorted(graph.images):
            img = graph.images[image_id]
            out.write(f"FEATURES {image_id} {len(img.features)}\n")
            for u, v in img.features:
                out.write(f"{_fmt(u)} {_fmt(v)}\n")
        for key in sorted(graph.edges):
            e = graph.edges[key]
            code = _CONFIG_CODE[e.config]
            mat = " ".join(_fmt(x) for x in e.matrix.ravel())
            out.write(f"PAIR {e.i} {e.j} {code} {mat} {len(e.matches)}\n")
            for fi, fj in e.matches:
                out.write(f"{fi} {fj}\n")


# ---------------------------------------------------------------------------
# sparse-model text export (cameras.txt / images.txt / points3D.txt)


def write_colmap_text(recon: Reconstruction, out_dir: Union[str, Path]) -> None:
    """Write the established three-file sparse-model text layout.

    Only registered images and live tracks are exported; the translation is
    t = -R c per the format convention; floats carry 12 significant digits.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    registered = recon.registered_ids()
    live = recon.live_tracks()

    # per-image observation slots: (track id, u, v) in deterministic order
    obs_of: Dict[int, List[Tuple[int, float, float]]] = {i: [] for i in registered}
    slot_of: Dict[Tuple[int, int], int] = {}
    for track in sorted(live, key=lambda t: t.track_id):
        for image_id, _feat, obs in track.observations:
            if image_id not in obs_of:
                continue
            slot = len(obs_of[image_id])
            obs_of[image_id].append((track.track_id, obs.u, obs.v))
            slot_of[(track.track_id, image_id)] = slot

    used_cams = sorted({recon.images[i].camera_id for i in registered})
    with open(out_dir / "cameras.txt", "w", encoding="utf-8") as out:
        out.write("# Camera list with one line of data per camera:\n")
        out.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        out.write(f"# Number of cameras: {len(used_cams)}\n")
        for cam_id in used_cams:
            intr = recon.cameras[cam_id]
            owner = next(
                recon.images[i] for i in registered if recon.images[i].camera_id == cam_id
            )
            if intr.model == SIMPLE_RADIAL:
                params = [(intr.fx + intr.fy) / 2.0, intr.cx, intr.cy, intr.k1]
            else:
                params = [intr.fx, intr.fy, intr.cx, intr.cy]
            out.write(
                f"{cam_id} {intr.model} {owner.width} {owner.height} "
                + " ".join(_fmt(p) for p in params)
                + "\n"
            )

    track_errors: Dict[int, float] = {}
    with open(out_dir / "images.txt", "w", encoding="utf-8") as out:
        out.write("# Image list with two lines of data per image:\n")
        out.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        out.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        out.write(f"# Number of images: {len(registered)}\n")
        for image_id in registered:
            img = recon.images[image_id]
            q = img.pose.rotation.q
            t = img.pose.translation()
            out.write(
                f"{image_id} {_fmt(q[0])} {_fmt(q[1])} {_fmt(q[2])} {_fmt(q[3])} "
                f"{_fmt(t[0])} {_fmt(t[1])} {_fmt(t[2])} {img.camera_id} {img.name}\n"
            )
            cells = []
            for track_id, u, v in obs_of[image_id]:
                cells.append(f"{_fmt(u)} {_fmt(v)} {track_id}")
            out.write(" ".join(cells) + "\n")

    with open(out_dir / "points3D.txt", "w", encoding="utf-8") as out:
        out.write("# 3D point list with one line of data per point:\n")
        out.write(
            "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n"
        )
        out.write(f"# Number of points: {len(live)}\n")
        for track in sorted(live, key=lambda t: t.track_id):
            color = track.color or (128, 128, 128)
            errs = []
            elements = []
            for image_id, _feat, obs in track.observations:
                if image_id not in obs_of:
                    continue
                img = recon.images[image_id]
                uv, ok = project(recon.cameras[img.camera_id], img.pose, track.point)
                if ok:
                    errs.append(
                        math.hypot(uv[0] - obs.u, uv[1] - obs.v)
                    )
                slot = slot_of[(track.track_id, image_id)]
                elements.append(f"{image_id} {slot}")
            err = float(np.mean(errs)) if errs else -1.0
            x, y, z = track.point
            out.write(
                f"{track.track_id} {_fmt(x)} {_fmt(y)} {_fmt(z)} "
                f"{color[0]} {color[1]} {color[2]} {_fmt(err)} "
                + " ".join(elements)
                + "\n"
            )


def write_ply(
    recon: Reconstruction, path: Union[str, Path], include_cameras: bool = False
) -> None:
    """ASCII point cloud; cameras optionally appended as red markers."""
    path = Path(path)
    rows = []
    for track in recon.live_tracks():
        color = track.color or (128, 128, 128)
        x, y, z = track.point
        rows.append((x, y, z, *color))
    if include_cameras:
        for image_id in recon.registered_ids():
            c = recon.images[image_id].pose.center
            rows.append((c[0], c[1], c[2], 255, 0, 0))
    with open(path, "w", encoding="utf-8") as out:
        out.write("ply\nformat ascii 1.0\n")
        out.write(f"element vertex {len(rows)}\n")
        out.write("property float x\nproperty float y\nproperty float z\n")
        out.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        out.write("end_header\n")
        for x, y, z, r, g, b in rows:
            out.write(f"{_fmt(x)} {_fmt(y)} {_fmt(z)} {r} {g} {b}\n")
