import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdpose3d.errors import DegenerateConfiguration, IndexMismatch, PointAtInfinity
from crowdpose3d.geometry import project_points
from crowdpose3d.homography import (
    GROUND_FRAME,
    GroundHomography,
    compose_check,
    estimate_homography,
    ground_homography_from_cameras,
    homographies_to_reference,
    image_to_ground_homography,
    load_ground_correspondences,
    load_homographies,
    normalize_homography,
    rectify,
    rectify_points,
    save_homographies,
)
from oracles import random_camera

SQUARE = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)


def planted(rng):
    H = np.eye(3) + 0.2 * rng.normal(size=(3, 3))
    H[2, :2] *= 0.05  # mild perspective keeps the grid in front of the line at infinity
    return H


def apply(H, pts):
    u = np.column_stack([pts, np.ones(len(pts))]) @ H.T
    return u[:, :2] / u[:, 2:]


def same_up_to_scale(A, B):
    return np.linalg.norm(normalize_homography(A) - normalize_homography(B))


class TestGroundHomography:
    def test_unit_norm_and_sign(self):
        h = GroundHomography(0, 1, -3 * np.eye(3))
        assert np.linalg.norm(h.H) == pytest.approx(1.0, abs=1e-12)
        assert h.H[2, 2] > 0

    def test_singular_rejected(self):
        with pytest.raises(DegenerateConfiguration):
            GroundHomography(0, 1, np.diag([1.0, 1.0, 0.0]))

    def test_normalize_is_idempotent(self):
        H = normalize_homography(np.random.default_rng(0).normal(size=(3, 3)))
        np.testing.assert_array_equal(normalize_homography(H), H)

    def test_compose_checks_views(self):
        a = GroundHomography(0, 1, np.eye(3))
        b = GroundHomography(2, 3, np.eye(3))
        with pytest.raises(IndexMismatch):
            a.compose(b)
        assert a.compose(GroundHomography(2, 0, np.eye(3))).from_view == 2


class TestEstimate:
    def test_identity(self):
        h = estimate_homography(np.hstack([SQUARE, SQUARE]))
        assert np.linalg.norm(h.H / h.H[2, 2] - np.eye(3)) < 1e-9

    def test_scaling(self):
        h = estimate_homography(np.hstack([SQUARE, 2 * SQUARE]))
        assert np.linalg.norm(h.H / h.H[2, 2] - np.diag([2.0, 2.0, 1.0])) < 1e-9

    def test_planted_twenty_points(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            H = planted(rng)
            src = rng.uniform(-3, 3, size=(20, 2))
            h = estimate_homography(np.hstack([src, apply(H, src)]))
            assert same_up_to_scale(h.H, H) < 1e-8

    def test_too_few_points(self):
        with pytest.raises(DegenerateConfiguration):
            estimate_homography(np.hstack([SQUARE[:3], SQUARE[:3]]))

    def test_collinear_four_points(self):
        src = np.array([[0, 0], [1, 1], [2, 2], [0, 1]], dtype=float)
        with pytest.raises(DegenerateConfiguration):
            estimate_homography(np.hstack([src, src]))

    def test_fully_collinear_many_points(self):
        src = np.column_stack([np.arange(8.0), np.zeros(8)])
        with pytest.raises(DegenerateConfiguration):
            estimate_homography(np.hstack([src, src]))

    def test_reproduces_destinations(self):
        rng = np.random.default_rng(2)
        H = planted(rng)
        src = rng.uniform(-3, 3, size=(12, 2))
        dst = apply(H, src)
        h = estimate_homography(np.hstack([src, dst]))
        np.testing.assert_allclose(rectify_points(h, src), dst, atol=1e-9)

    @given(st.integers(0, 2**31), st.floats(0.2, 5.0), st.floats(-np.pi, np.pi))
    @settings(max_examples=50, deadline=None)
    def test_similarity_invariance(self, seed, s, theta):
        # conjugating by similarities S_src, S_dst turns H into S_dst H S_src^-1
        rng = np.random.default_rng(seed)
        H = planted(rng)
        src = rng.uniform(-3, 3, size=(10, 2))
        dst = apply(H, src)

        def sim(t):
            c, n = np.cos(theta), np.sin(theta)
            return np.array([[s * c, -s * n, t[0]], [s * n, s * c, t[1]], [0, 0, 1]])

        Ss, Sd = sim(rng.normal(size=2)), sim(rng.normal(size=2))
        h1 = estimate_homography(np.hstack([src, dst])).H
        h2 = estimate_homography(np.hstack([apply(Ss, src), apply(Sd, dst)])).H
        assert same_up_to_scale(h2, Sd @ h1 @ np.linalg.inv(Ss)) < 1e-8


class TestRectify:
    def test_identity(self):
        np.testing.assert_allclose(rectify(GroundHomography.identity(), (3.5, -2)), (3.5, -2), rtol=1e-15)

    def test_scaling(self):
        np.testing.assert_allclose(rectify(np.diag([2.0, 2.0, 1.0]), (1, 1)), (2, 2))

    def test_matches_matrix_arithmetic(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            H = planted(rng)
            p = rng.uniform(-3, 3, size=2)
            u = H @ np.append(p, 1.0)
            np.testing.assert_allclose(rectify(H, p), u[:2] / u[2], rtol=1e-12)

    def test_point_at_infinity(self):
        H = np.eye(3)
        H[2] = [1.0, 0.0, 0.0]
        with pytest.raises(PointAtInfinity):
            rectify(H, (0.0, 5.0))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            rectify(np.eye(3), (np.nan, 0))


class TestComposeCheck:
    def test_identities(self):
        I = np.eye(3)
        assert compose_check(GroundHomography(1, 0, I), GroundHomography(2, 1, I), GroundHomography(2, 0, I)) < 1e-15

    def test_planted_and_perturbed(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            A, B = planted(rng), planted(rng)
            h_jk, h_kl = GroundHomography(1, 0, A), GroundHomography(2, 1, B)
            assert compose_check(h_jk, h_kl, GroundHomography(2, 0, A @ B)) < 1e-8
            # a 1% change in a direction that is not a pure rescaling
            AB = A @ B
            E = rng.normal(size=(3, 3))
            E -= np.sum(E * AB) / np.sum(AB * AB) * AB
            noisy = AB + 0.01 * np.linalg.norm(AB) * E / np.linalg.norm(E)
            assert compose_check(h_jk, h_kl, GroundHomography(2, 0, noisy)) > 1e-3

    def test_index_mismatch(self):
        I = np.eye(3)
        with pytest.raises(IndexMismatch):
            compose_check(GroundHomography(1, 0, I), GroundHomography(2, 1, I), GroundHomography(3, 0, I))


class TestCameraHomographies:
    def test_same_camera_is_identity(self):
        cam = random_camera(np.random.default_rng(5))
        h = ground_homography_from_cameras(cam, cam)
        assert np.linalg.norm(h.H / h.H[2, 2] - np.eye(3)) < 1e-9

    def test_plane_transfer(self):
        rng = np.random.default_rng(6)
        for k in range(10):
            a, b = random_camera(rng, 0), random_camera(rng, 1)
            h = ground_homography_from_cameras(a, b)
            X = np.column_stack([rng.uniform(-3, 3, size=(100, 2)), np.zeros(100)])
            np.testing.assert_allclose(rectify_points(h, project_points(b, X)), project_points(a, X), atol=1e-9)

    def test_image_to_ground(self):
        rng = np.random.default_rng(7)
        cam = random_camera(rng, 3)
        h = image_to_ground_homography(cam)
        assert (h.from_view, h.to_view) == (3, GROUND_FRAME)
        X = np.column_stack([rng.uniform(-3, 3, size=(50, 2)), np.zeros(50)])
        np.testing.assert_allclose(rectify_points(h, project_points(cam, X)), X[:, :2], atol=1e-9)

    def test_chain_to_reference(self):
        rng = np.random.default_rng(8)
        cams = [random_camera(rng, k) for k in range(4)]
        pair = [ground_homography_from_cameras(cams[k], cams[k + 1]) for k in range(3)]
        into = homographies_to_reference(pair, range(4), 0)
        X = np.column_stack([rng.uniform(-2, 2, size=(20, 2)), np.zeros(20)])
        for v in range(4):
            assert into[v].from_view == v and into[v].to_view == 0
            np.testing.assert_allclose(rectify_points(into[v], project_points(cams[v], X)), project_points(cams[0], X),
                                       atol=1e-6)
        assert 9 not in homographies_to_reference(pair, [0, 9], 0)


class TestFiles:
    def test_cache_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        hs = [GroundHomography(k, GROUND_FRAME, planted(rng)) for k in range(3)]
        save_homographies(tmp_path / "h.json", hs)
        for a, b in zip(hs, load_homographies(tmp_path / "h.json")):
            assert (a.from_view, a.to_view) == (b.from_view, b.to_view)
            np.testing.assert_array_equal(a.H, b.H)

    def test_ground_correspondence_file(self, tmp_path):
        import json

        rng = np.random.default_rng(10)
        H = planted(rng)
        pts_b = rng.uniform(-3, 3, size=(8, 2))
        rows = np.hstack([apply(H, pts_b), pts_b]).tolist()
        (tmp_path / "g.json").write_text(json.dumps([{"view_a": 0, "view_b": 2, "points": rows}]))
        (h,) = load_ground_correspondences(tmp_path / "g.json")
        assert (h.from_view, h.to_view) == (2, 0)
        assert same_up_to_scale(h.H, H) < 1e-8
