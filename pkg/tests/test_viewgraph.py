import math

import numpy as np
import pytest

from gsfm.core import PINHOLE, CameraIntrinsics, Pose, Rotation, exp_map, project_many
from gsfm.viewgraph import (
    CALIBRATED,
    HOMOGRAPHY,
    UNCALIBRATED,
    ImageInfo,
    TwoViewGeometry,
    ViewGraph,
    ViewGraphError,
    build_tracks,
    decompose_edge,
    filter_epipole_and_angle,
    fundamental_from_essential,
    verify_matches,
)

INTR = CameraIntrinsics(PINHOLE, 500.0, 500.0, 320.0, 240.0)


def skew(t):
    return np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])


def make_pair(rng, rot_axis=(0, 1, 0), rot_deg=25.0, t=(1.0, 0.0, 0.0), n=60,
              lo=(-1, -1, 3), hi=(1, 1, 6)):
    """Exact two-view setup: camera i at origin/identity, known relative pose."""
    R = Rotation.from_axis_angle(rot_axis, math.radians(rot_deg)).matrix()
    t = np.asarray(t, dtype=float)
    t = t / np.linalg.norm(t)
    pose_i = Pose(Rotation.identity(), np.zeros(3))
    pose_j = Pose(Rotation.from_matrix(R), -R.T @ t)
    X = rng.uniform(lo, hi, size=(n, 3))
    uv_i, ok_i = project_many(INTR, pose_i, X)
    uv_j, ok_j = project_many(INTR, pose_j, X)
    assert ok_i.all() and ok_j.all()
    E = skew(t) @ R
    matches = np.stack([np.arange(n), np.arange(n)], axis=1)
    return E, R, t, uv_i, uv_j, matches, X


def sampson_oracle(F, xi, xj):
    """Independent scalar Sampson distance for one pixel pair."""
    xi = np.array([xi[0], xi[1], 1.0])
    xj = np.array([xj[0], xj[1], 1.0])
    num = float(xj @ F @ xi)
    Fxi = F @ xi
    Ftxj = F.T @ xj
    den = Fxi[0] ** 2 + Fxi[1] ** 2 + Ftxj[0] ** 2 + Ftxj[1] ** 2
    return abs(num) / math.sqrt(den)


class TestVerifyMatches:
    def test_exact_homography_all_retained(self):
        rng = np.random.default_rng(0)
        # planar points z=5 viewed by two cameras
        R = Rotation.from_axis_angle([0, 1, 0], 0.3).matrix()
        t = np.array([1.0, 0.2, 0.0])
        n_pl = np.array([0.0, 0.0, 1.0])
        K = INTR.k_matrix()
        H = K @ (R + np.outer(t, n_pl) / 5.0) @ np.linalg.inv(K)
        pose_i = Pose(Rotation.identity(), np.zeros(3))
        pose_j = Pose(Rotation.from_matrix(R), -R.T @ t)
        X = rng.uniform([-1.5, -1.5, 5.0], [1.5, 1.5, 5.0], size=(40, 3))
        X[:, 2] = 5.0
        uv_i, _ = project_many(INTR, pose_i, X)
        uv_j, ok = project_many(INTR, pose_j, X)
        assert ok.all()
        matches = np.stack([np.arange(40), np.arange(40)], axis=1)
        edge = TwoViewGeometry(0, 1, HOMOGRAPHY, H, matches)
        out = verify_matches(edge, uv_i, uv_j, INTR, INTR, threshold_px=4.0)
        assert out.valid and len(out.matches) == 40

    def test_perturbed_match_removed_under_f(self):
        rng = np.random.default_rng(1)
        E, R, t, uv_i, uv_j, matches, _ = make_pair(rng)
        F = fundamental_from_essential(E, INTR, INTR)
        uv_j = uv_j.copy()
        uv_j[7] += np.array([0.0, 50.0])  # 50 px off, across the epipolar line
        # oracle: compute Sampson distances directly and find offenders
        offenders = [
            k for k in range(len(matches))
            if sampson_oracle(F, uv_i[k], uv_j[k]) > 4.0
        ]
        assert offenders == [7]
        edge = TwoViewGeometry(0, 1, UNCALIBRATED, F, matches)
        out = verify_matches(edge, uv_i, uv_j, INTR, INTR, threshold_px=4.0)
        assert out.valid
        kept = set(out.matches[:, 0].tolist())
        assert kept == set(range(60)) - {7}

    def test_edge_dropped_below_min_support(self):
        rng = np.random.default_rng(2)
        E, R, t, uv_i, uv_j, matches, _ = make_pair(rng, n=20)
        # perturb 10, leaving 10 survivors < 15
        uv_j = uv_j.copy()
        uv_j[:10] += 80.0
        edge = TwoViewGeometry(0, 1, CALIBRATED, E, matches)
        out = verify_matches(edge, uv_i, uv_j, INTR, INTR, threshold_px=4.0)
        assert not out.valid and len(out.matches) == 0

    def test_filtering_monotone(self):
        rng = np.random.default_rng(3)
        E, R, t, uv_i, uv_j, matches, _ = make_pair(rng)
        uv_j = uv_j + rng.normal(0, 2.0, uv_j.shape)
        edge = TwoViewGeometry(0, 1, CALIBRATED, E, matches)
        out1 = verify_matches(edge, uv_i, uv_j, INTR, INTR, threshold_px=6.0)
        out2 = verify_matches(out1, uv_i, uv_j, INTR, INTR, threshold_px=6.0)
        assert len(out2.matches) <= len(out1.matches) <= len(edge.matches)

    def test_missing_feature_index_errors(self):
        edge = TwoViewGeometry(0, 1, CALIBRATED, np.eye(3), [[0, 99]])
        with pytest.raises(ViewGraphError):
            verify_matches(edge, np.zeros((1, 2)), np.zeros((1, 2)), INTR, INTR)


class TestDecomposeEdge:
    def test_known_pose_recovery(self):
        rng = np.random.default_rng(4)
        E, R, t, uv_i, uv_j, matches, _ = make_pair(rng, rot_deg=30.0, n=100)
        edge = TwoViewGeometry(0, 1, CALIBRATED, E, matches)
        out = decompose_edge(edge, uv_i, uv_j, INTR, INTR)
        assert out.valid and len(out.matches) == 100
        assert np.abs(out.rotation.matrix() - R).max() < 1e-6
        assert np.abs(out.direction - t).max() < 1e-6

    def test_identity_rotation_forward_translation(self):
        rng = np.random.default_rng(5)
        E, R, t, uv_i, uv_j, matches, _ = make_pair(
            rng, rot_deg=0.0, t=(0, 0, 1), lo=(-1, -1, 4), hi=(1, 1, 8)
        )
        edge = TwoViewGeometry(0, 1, CALIBRATED, E, matches)
        out = decompose_edge(edge, uv_i, uv_j, INTR, INTR)
        assert out.valid and len(out.matches) == len(matches)

    def test_mixed_depth_cheirality(self):
        rng = np.random.default_rng(6)
        R = Rotation.from_axis_angle([0, 1, 0], 0.2).matrix()
        t = np.array([1.0, 0.0, 0.0])
        X = rng.uniform([-1, -1, 3], [1, 1, 6], size=(80, 3))
        X[40:, 2] *= -1.0  # behind both cameras
        p_i = X
        p_j = X @ R.T + t
        uv_i = p_i[:, :2] / p_i[:, 2:3] * 500.0 + [320, 240]
        uv_j = p_j[:, :2] / p_j[:, 2:3] * 500.0 + [320, 240]
        matches = np.stack([np.arange(80), np.arange(80)], axis=1)
        edge = TwoViewGeometry(0, 1, CALIBRATED, skew(t) @ R, matches)
        out = decompose_edge(edge, uv_i, uv_j, INTR, INTR)
        assert out.valid
        assert set(out.matches[:, 0].tolist()) == set(range(40))

    def test_f_promotion_recovers_pose(self):
        rng = np.random.default_rng(7)
        E, R, t, uv_i, uv_j, matches, _ = make_pair(rng)
        F = fundamental_from_essential(E, INTR, INTR)
        edge = TwoViewGeometry(0, 1, UNCALIBRATED, F, matches)
        out = decompose_edge(edge, uv_i, uv_j, INTR, INTR)
        assert out.valid
        assert np.abs(out.rotation.matrix() - R).max() < 1e-6

    def test_random_configurations_property(self):
        # noiseless E recovery within 1e-6 over many random configurations
        rng = np.random.default_rng(8)
        worst_r, worst_t = 0.0, 0.0
        for trial in range(1000):
            axis = rng.standard_normal(3)
            deg = rng.uniform(1.0, 60.0)
            t = rng.standard_normal(3)
            t /= np.linalg.norm(t)
            # keep points in front of both cameras: sample until projections ok
            R = Rotation.from_axis_angle(axis, math.radians(deg)).matrix()
            pose_i = Pose(Rotation.identity(), np.zeros(3))
            pose_j = Pose(Rotation.from_matrix(R), -R.T @ t)
            X = rng.uniform([-1, -1, 4], [1, 1, 8], size=(60, 3))
            uv_i, ok_i = project_many(INTR, pose_i, X)
            uv_j, ok_j = project_many(INTR, pose_j, X)
            ok = ok_i & ok_j
            if ok.sum() < 20:
                continue
            idx = np.nonzero(ok)[0]
            matches = np.stack([idx, idx], axis=1)
            edge = TwoViewGeometry(0, 1, CALIBRATED, skew(t) @ R, matches)
            out = decompose_edge(edge, uv_i, uv_j, INTR, INTR)
            assert out.valid
            worst_r = max(worst_r, float(np.abs(out.rotation.matrix() - R).max()))
            worst_t = max(worst_t, float(np.abs(out.direction - t).max()))
        assert worst_r < 1e-6
        assert worst_t < 1e-6


class TestEpipoleAngleFilter:
    def test_sideways_wide_angle_retained(self):
        rng = np.random.default_rng(9)
        E, R, t, uv_i, uv_j, matches, _ = make_pair(rng, rot_deg=10.0, t=(1, 0, 0))
        edge = TwoViewGeometry(0, 1, CALIBRATED, E, matches)
        edge = decompose_edge(edge, uv_i, uv_j, INTR, INTR)
        out = filter_epipole_and_angle(edge, uv_i, uv_j, INTR, INTR, 1.0, 1.0)
        assert len(out.matches) == len(edge.matches)

    def test_forward_motion_on_axis_removed(self):
        # forward motion: epipole at the principal point; a match exactly
        # there has zero epipole angle and zero triangulation angle
        R = np.eye(3)
        t = np.array([0.0, 0.0, 1.0])
        uv_i = np.array([[320.0, 240.0], [400.0, 300.0], [200.0, 100.0]])
        uv_j = np.array([[320.0, 240.0], [420.0, 320.0], [180.0, 80.0]])
        matches = np.array([[0, 0], [1, 1], [2, 2]])
        edge = TwoViewGeometry(
            0, 1, CALIBRATED, skew(t) @ R, matches,
            rotation=Rotation.identity(), direction=t,
        )
        out = filter_epipole_and_angle(edge, uv_i, uv_j, INTR, INTR, 1.0, 1.0)
        assert 0 not in set(out.matches[:, 0].tolist())

    def test_exactly_the_near_epipole_points_removed(self):
        # synthetic: points within 1 degree of the epipole direction go away
        rng = np.random.default_rng(10)
        R = np.eye(3)
        t = np.array([0.0, 0.0, 1.0])  # forward motion, epipole on the axis
        rays = []
        for k in range(40):
            if k < 4:
                ang = math.radians(rng.uniform(0.05, 0.9))  # within 1 degree
            else:
                ang = math.radians(rng.uniform(3.0, 12.0))
            phi = rng.uniform(0, 2 * math.pi)
            rays.append([math.sin(ang) * math.cos(phi), math.sin(ang) * math.sin(phi), math.cos(ang)])
        rays = np.asarray(rays)
        X = rays * rng.uniform(4.0, 8.0, (40, 1))
        p_i = X
        p_j = X @ R.T + t
        uv_i = p_i[:, :2] / p_i[:, 2:3] * 500.0 + [320, 240]
        uv_j = p_j[:, :2] / p_j[:, 2:3] * 500.0 + [320, 240]
        matches = np.stack([np.arange(40), np.arange(40)], axis=1)
        edge = TwoViewGeometry(
            0, 1, CALIBRATED, skew(t) @ R, matches,
            rotation=Rotation.identity(), direction=t,
        )
        # wide triangulation tolerance: isolate the epipole test
        out = filter_epipole_and_angle(edge, uv_i, uv_j, INTR, INTR, 0.0001, 1.0)
        removed = set(range(40)) - set(out.matches[:, 0].tolist())
        assert removed == {0, 1, 2, 3}


def graph_with_matches(match_lists):
    """Tiny 3-image graph; match_lists maps (i, j) -> list of index pairs."""
    graph = ViewGraph()
    graph.cameras[0] = INTR
    feats = np.array([[100.0, 100.0], [200.0, 200.0], [300.0, 300.0]])
    for image_id in (0, 1, 2):
        graph.add_image(ImageInfo(image_id, 0, f"im{image_id}", 640, 480, feats))
    for (i, j), matches in match_lists.items():
        graph.add_edge(
            TwoViewGeometry(i, j, CALIBRATED, np.eye(3), np.asarray(matches))
        )
    return graph


class TestBuildTracks:
    def test_transitive_closure(self):
        graph = graph_with_matches({(0, 1): [[1, 1]], (1, 2): [[1, 1]]})
        tracks = build_tracks(graph)
        assert len(tracks) == 1
        assert sorted((img, feat) for img, feat, _ in tracks[0].observations) == [
            (0, 1), (1, 1), (2, 1)
        ]

    def test_same_image_conflict_drops_image(self):
        # (A1,B1) and (A2,B1): A has two features in the component -> all of
        # A dropped -> track has only B1 -> too short -> discarded
        graph = graph_with_matches({(0, 1): [[1, 1], [2, 1]]})
        tracks = build_tracks(graph)
        assert tracks == []

    def test_ids_dense_and_sorted_by_length(self):
        graph = graph_with_matches(
            {(0, 1): [[1, 1], [0, 0]], (1, 2): [[1, 1]]}
        )
        tracks = build_tracks(graph)
        assert [t.track_id for t in tracks] == [0, 1]
        assert len(tracks[0]) >= len(tracks[1])

    def test_full_visibility_oracle(self):
        # ground-truth correspondence oracle: every point visible everywhere
        # with no mismatches -> exactly n_points tracks of length n_cams
        from gsfm.synthetic import SceneSpec, generate_scene

        scene, graph = generate_scene(SceneSpec("GENERAL", n_cams=6, n_points=50, seed=0))
        tracks = build_tracks(graph)
        by_point = {}
        for image_id, feats in scene.feature_point.items():
            for feat_idx, point_idx in enumerate(feats):
                by_point.setdefault(int(point_idx), set()).add((image_id, feat_idx))
        expected = {frozenset(v) for v in by_point.values() if len(v) >= 2}
        got = {
            frozenset((img, feat) for img, feat, _ in t.observations) for t in tracks
        }
        assert got == expected

    def test_partition_property(self):
        # every surviving match lands inside one track or was dropped by the
        # same-image rule
        rng = np.random.default_rng(11)
        from gsfm.synthetic import SceneSpec, generate_scene

        scene, graph = generate_scene(
            SceneSpec("GENERAL", n_cams=6, n_points=40, seed=1, outlier_fraction=0.1)
        )
        tracks = build_tracks(graph)
        node_track = {}
        for t in tracks:
            for img, feat, _ in t.observations:
                node_track[(img, feat)] = t.track_id
        for edge in graph.edges.values():
            for fi, fj in edge.matches:
                a = node_track.get((edge.i, int(fi)))
                b = node_track.get((edge.j, int(fj)))
                if a is not None and b is not None:
                    assert a == b
