import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdpose3d.detections import Detection2D
from crowdpose3d.errors import MissingFeet, RingTopologyError, ViewMismatch
from crowdpose3d.homography import GROUND_FRAME, GroundHomography, rectify
from crowdpose3d.lap import Assignment
from crowdpose3d.matching import (
    FootPair,
    PersonTrackSet,
    collect_foot_pairs,
    cost_matrix,
    edge_cost,
    extract_foot_pairs,
    match_pair,
    match_views,
    merge_multiview,
    ring_order,
)
from crowdpose3d.metrics import matching_precision
from crowdpose3d.synth import SceneSpec, generate

HEELS = (19, 22)
SAME = GroundHomography.identity()


def feet_detection(view, index, left, right, conf=1.0, n_joints=23):
    joints = np.zeros((n_joints, 2))
    joints[HEELS[0]], joints[HEELS[1]] = left, right
    c = np.ones(n_joints)
    c[list(HEELS)] = conf
    return Detection2D(view, index, joints, c, np.ones(n_joints, bool), (0, 0, 100, 100))


def foot_pair(view, index, left, right, frame=GROUND_FRAME):
    left, right = np.asarray(left, float), np.asarray(right, float)
    return FootPair(view, index, left, right, frame, left, right)


def direct_cost(fa, fb, H, k):
    """Three-term cost written straight from its definition."""
    pm = rectify(H, 0.5 * (fb.left_rect + fb.right_rect))
    pl = 0.5 * (fa.left_rect + fa.right_rect)
    vl = fa.right_rect - fa.left_rect
    vm = rectify(H, fb.right_rect) - rectify(H, fb.left_rect)
    c = k[0] * np.hypot(*(pl - pm))
    a, b = np.hypot(*vl), np.hypot(*vm)
    if a >= 1e-6 and b >= 1e-6:
        c += k[1] * abs(a - b) + k[2] * abs(vl[0] * vm[1] - vl[1] * vm[0]) / (a * b)
    return c


def rigid(theta, t):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, t[0]], [s, c, t[1]], [0, 0, 1.0]])


class TestFootPairs:
    def test_anchor_and_stride(self):
        det = feet_detection(0, 0, (0.0, 0.0), (0.3, 0.0))
        fp = extract_foot_pairs(det, GroundHomography(0, GROUND_FRAME, np.eye(3)))
        np.testing.assert_allclose(fp.anchor, (0.15, 0.0), atol=1e-12)
        np.testing.assert_allclose(fp.stride, (0.3, 0.0), atol=1e-12)
        assert fp.detection is det and fp.frame == GROUND_FRAME

    def test_low_confidence_heel(self):
        det = feet_detection(0, 0, (0.0, 0.0), (0.3, 0.0), conf=0.01)
        with pytest.raises(MissingFeet):
            extract_foot_pairs(det, GroundHomography(0, GROUND_FRAME, np.eye(3)))

    def test_absent_heel_goes_to_unmatched_pool(self):
        good = feet_detection(0, 0, (0.0, 0.0), (0.3, 0.0))
        joints = good.joints.copy()
        joints[HEELS[1]] = np.nan
        bad = Detection2D(0, 1, joints, good.confidence, good.present, good.bbox)
        feet, missing = collect_foot_pairs([good, bad], GroundHomography(0, GROUND_FRAME, np.eye(3)))
        assert [f.index for f in feet] == [0] and missing == [1]

    def test_wrong_view(self):
        det = feet_detection(1, 0, (0, 0), (1, 0))
        with pytest.raises(ViewMismatch):
            extract_foot_pairs(det, GroundHomography(0, GROUND_FRAME, np.eye(3)))

    def test_random_recomputation(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            H = np.eye(3) + 0.1 * rng.normal(size=(3, 3))
            H[2, :2] *= 0.01
            h = GroundHomography(0, GROUND_FRAME, H)
            l, r = rng.uniform(0, 100, size=(2, 2))
            fp = extract_foot_pairs(feet_detection(0, 0, l, r), h)
            lr, rr = rectify(H, l), rectify(H, r)
            np.testing.assert_allclose(fp.anchor, (lr + rr) / 2, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(fp.stride, rr - lr, rtol=1e-12, atol=1e-12)


class TestEdgeCost:
    def test_perfect_match(self):
        a = foot_pair(0, 0, (1, 1), (1.3, 1.1))
        b = foot_pair(1, 0, (1, 1), (1.3, 1.1))
        assert edge_cost(a, b, SAME, (1, 1, 1)) == 0.0

    def test_orthogonal_unit_strides(self):
        a = foot_pair(0, 0, (-0.5, 0), (0.5, 0))
        b = foot_pair(1, 0, (0, -0.5), (0, 0.5))
        assert edge_cost(a, b, SAME, (1, 1, 1)) == pytest.approx(1.0, abs=1e-15)

    def test_degenerate_stride_uses_location_only(self):
        a = foot_pair(0, 0, (0, 0), (0, 0))
        b = foot_pair(1, 0, (3, 4), (3.5, 4))
        assert edge_cost(a, b, SAME, (1, 1, 1)) == pytest.approx(np.hypot(3.25, 4))

    def test_view_mismatch(self):
        a = foot_pair(0, 0, (0, 0), (1, 0), frame=0)
        b = foot_pair(1, 0, (0, 0), (1, 0), frame=1)
        with pytest.raises(ViewMismatch):
            edge_cost(a, b, GroundHomography(2, 0, np.eye(3)))

    def test_negative_weights(self):
        a = foot_pair(0, 0, (0, 0), (1, 0))
        with pytest.raises(ValueError):
            edge_cost(a, a, SAME, (1, -1, 1))

    def test_formula_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            H = np.eye(3) + 0.1 * rng.normal(size=(3, 3))
            H[2, :2] *= 0.01
            h = GroundHomography(1, 0, H)
            a = foot_pair(0, 0, *rng.uniform(-3, 3, size=(2, 2)), frame=0)
            b = foot_pair(1, 0, *rng.uniform(-3, 3, size=(2, 2)), frame=1)
            k = rng.uniform(0, 2, size=3)
            assert edge_cost(a, b, h, k) == pytest.approx(direct_cost(a, b, h.H, k), rel=1e-12, abs=1e-12)

    def test_cost_matrix_agrees(self):
        rng = np.random.default_rng(2)
        fa = [foot_pair(0, i, *rng.uniform(-3, 3, size=(2, 2))) for i in range(5)]
        fb = [foot_pair(1, i, *rng.uniform(-3, 3, size=(2, 2))) for i in range(4)]
        fb.append(foot_pair(1, 4, (0, 0), (0, 0)))
        C = cost_matrix(fa, fb, SAME)
        for l, a in enumerate(fa):
            for m, b in enumerate(fb):
                assert C[l, m] == pytest.approx(edge_cost(a, b, SAME), rel=1e-12, abs=1e-14)

    @given(st.integers(0, 2**31), st.floats(-np.pi, np.pi))
    @settings(max_examples=100, deadline=None)
    def test_symmetry_under_rigid_frames(self, seed, theta):
        rng = np.random.default_rng(seed)
        T = rigid(theta, rng.normal(size=2))
        h = GroundHomography(1, 0, T)  # frame 1 -> frame 0
        a = foot_pair(0, 0, *rng.uniform(-3, 3, size=(2, 2)), frame=0)
        b = foot_pair(1, 0, *rng.uniform(-3, 3, size=(2, 2)), frame=1)
        k = tuple(rng.uniform(0, 2, size=3))
        assert edge_cost(a, b, h, k) == pytest.approx(edge_cost(b, a, h.inverse(), k), abs=1e-9)

    @given(st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        a = foot_pair(0, 0, *rng.normal(size=(2, 2)))
        b = foot_pair(1, 0, *rng.normal(size=(2, 2)))
        assert edge_cost(a, b, SAME, tuple(rng.uniform(0, 3, size=3))) >= 0


def scene_feet(truth):
    return {v: collect_foot_pairs(truth.detections[v], truth.to_ground[v])[0] for v in truth.detections}


class TestMatchPair:
    def test_empty_view_b(self):
        fa = [foot_pair(0, i, (i, 0), (i + 0.3, 0)) for i in range(3)]
        res = match_pair(fa, [], SAME, view_b=1)
        assert res.pairs == () and res.unmatched_a == (0, 1, 2)
        assert (res.view_a, res.view_b) == (0, 1)

    def test_noiseless_ten_persons(self):
        truth = generate(SceneSpec(n_persons=10, n_views=2, seed=3))
        feet = scene_feet(truth)
        res = match_pair(feet[0], feet[1], SAME)
        c = truth.correspondence
        assert len(res.pairs) == 10
        assert all(c[(0, l)] == c[(1, m)] for l, m, _ in res.pairs)

    def test_person_visible_in_one_view(self):
        truth = generate(SceneSpec(n_persons=10, n_views=2, seed=4))
        feet = scene_feet(truth)
        hidden = feet[1][3]
        res = match_pair(feet[0], [f for f in feet[1] if f is not hidden], SAME)
        c = truth.correspondence
        lone = next(i for i in range(10) if c[(0, i)] == c[(1, hidden.index)])
        assert res.unmatched_a == (lone,)
        assert len(res.pairs) == 9 and all(c[(0, l)] == c[(1, m)] for l, m, _ in res.pairs)

    def test_gate_drops_expensive_pairs(self):
        fa = [foot_pair(0, 0, (0, 0), (0.3, 0)), foot_pair(0, 1, (10, 0), (10.3, 0))]
        fb = [foot_pair(1, 0, (0.05, 0), (0.35, 0)), foot_pair(1, 1, (30, 0), (30.3, 0))]
        res = match_pair(fa, fb, SAME, gate=1.0)
        assert [(l, m) for l, m, _ in res.pairs] == [(0, 0)]
        assert res.unmatched_a == (1,) and res.unmatched_b == (1,)
        assert len(res.meta["gated"]) == 1

    def test_gate_in_lap_declines_a_forced_chain(self):
        # a0's partner is missing from view b and b1's from view a; forcing two
        # pairs links both wrongly at costs under the gate
        fa = [foot_pair(0, 0, (0, 0), (0.3, 0)), foot_pair(0, 1, (0.9, 0), (1.2, 0))]
        fb = [foot_pair(1, 0, (0.95, 0), (1.25, 0)), foot_pair(1, 1, (1.7, 0), (2.0, 0))]
        forced = match_pair(fa, fb, SAME)
        assert sorted((l, m) for l, m, _ in forced.pairs) == [(0, 0), (1, 1)]
        res = match_pair(fa, fb, SAME, gate_in_lap=True)
        assert [(l, m) for l, m, _ in res.pairs] == [(1, 0)]
        assert res.unmatched_a == (0,) and res.unmatched_b == (1,)

    @given(st.integers(0, 2**31), st.integers(0, 4), st.integers(0, 4))
    @settings(max_examples=100, deadline=None)
    def test_gate_in_lap_minimizes_penalized_cost(self, seed, n, m):
        rng = np.random.default_rng(seed)
        fa = [foot_pair(0, i, p, p + (0.3, 0)) for i, p in enumerate(rng.uniform(0, 3, size=(n, 2)))]
        fb = [foot_pair(1, i, p, p + rng.normal(0.3, 0.1, 2)) for i, p in enumerate(rng.uniform(0, 3, size=(m, 2)))]
        gate = 1.0
        res = match_pair(fa, fb, SAME, gate=gate, view_a=0, view_b=1, gate_in_lap=True)
        C = cost_matrix(fa, fb, SAME, (1.0, 1.0, 0.5))

        def penalized(pairs):
            return sum(C[l, k] for l, k in pairs) + gate / 2 * (n + m - 2 * len(pairs))

        best = min(
            penalized(list(zip(rows, cols)))
            for k in range(min(n, m) + 1)
            for rows in itertools.combinations(range(n), k)
            for cols in itertools.permutations(range(m), k)
        )
        assert penalized([(l, k) for l, k, _ in res.pairs]) == pytest.approx(best, abs=1e-9)
        assert all(c <= gate for _, _, c in res.pairs) and res.meta["gated"] == []

    def test_gate_in_lap_recovers_displaced_pairs(self):
        truth = generate(SceneSpec(n_persons=12, n_views=4, noise_px=2.0, area=(5.0, 5.0), seed=3,
                                   occlusion_rate=0.05))
        feet = scene_feet(truth)
        c = truth.correspondence
        forced = match_pair(feet[0], feet[1], SAME)
        res = match_pair(feet[0], feet[1], SAME, gate_in_lap=True)
        assert len(res.pairs) > len(forced.pairs)
        assert all(c[(0, l)] == c[(1, m)] for l, m, _ in res.pairs)

    def test_mixed_views_rejected(self):
        with pytest.raises(ViewMismatch):
            match_pair([foot_pair(0, 0, (0, 0), (1, 0)), foot_pair(2, 1, (0, 0), (1, 0))], [], SAME)

    def test_all_views_noiseless_full_precision(self):
        for seed in range(5):
            truth = generate(SceneSpec(n_persons=8, n_views=3, seed=seed))
            tracks, _ = match_views(truth.detections, truth.to_ground)
            assert matching_precision(tracks, truth.correspondence) == 1.0


def asg(va, vb, pairs, na=None, nb=None):
    la = {l for l, _, _ in pairs}
    lb = {m for _, m, _ in pairs}
    ua = tuple(i for i in range(na or 0) if i not in la)
    ub = tuple(i for i in range(nb or 0) if i not in lb)
    return Assignment(tuple(pairs), ua, ub, va, vb)


class TestMerge:
    def test_ring_order(self):
        assert ring_order([0, 1]) == [(0, 1)]
        assert ring_order([0, 1, 2]) == [(0, 1), (1, 2), (2, 0)]
        assert ring_order([5]) == []

    def test_two_views(self):
        a = asg(0, 1, [(0, 1, 0.2), (1, 0, 0.3)], na=3, nb=2)
        tracks = merge_multiview([a])
        members = sorted(tuple(sorted(p.members.items())) for p in tracks)
        assert members == [((0, 0), (1, 1)), ((0, 1), (1, 0)), ((0, 2),)]

    def test_four_views_noiseless(self):
        truth = generate(SceneSpec(n_persons=5, n_views=4, seed=11, area=(3.0, 3.0)))
        assert all(len(truth.detections[v]) == 5 for v in range(4))
        tracks, pairwise = match_views(truth.detections, truth.to_ground)
        assert len(pairwise) == 4 and len(tracks) == 5
        for p in tracks:
            assert p.views == [0, 1, 2, 3] and p.closed
            assert len({truth.correspondence[(v, d)] for v, d in p.members.items()}) == 1

    def test_adversarial_swap_is_broken_at_expensive_edge(self):
        # detection index is the true identity in every view
        pairwise = [
            asg(0, 1, [(0, 0, 0.1), (1, 1, 0.1)]),
            asg(1, 2, [(0, 0, 0.2), (1, 1, 0.2)]),
            asg(2, 0, [(0, 1, 0.9), (1, 0, 0.8)]),
        ]
        tracks = merge_multiview(pairwise)
        assert len(tracks) == 2
        for p in tracks:
            assert not p.closed
            assert len(set(p.members.values())) == 1
            assert p.views == [0, 1, 2]

    def test_closed_cycle(self):
        pairwise = [asg(0, 1, [(0, 0, 0.1)]), asg(1, 2, [(0, 0, 0.1)]), asg(2, 0, [(0, 0, 0.1)])]
        (p,) = merge_multiview(pairwise)
        assert p.closed and p.cost == pytest.approx(0.3)

    def test_counts_add_singletons(self):
        tracks = merge_multiview([asg(0, 1, [(0, 0, 0.1)])], {0: 2, 1: 1})
        assert sorted(p.members for p in tracks if len(p.members) == 1) == [{0: 1}]

    @pytest.mark.parametrize(
        "edges",
        [
            [(0, 1), (1, 2)],
            [(0, 1), (1, 2), (2, 0), (0, 1)],
            [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)],
            [(0, 0)],
            [(0, None)],
        ],
    )
    def test_ring_topology_errors(self, edges):
        with pytest.raises(RingTopologyError):
            merge_multiview([asg(a, b, []) for a, b in edges])

    @given(st.integers(0, 2**31), st.integers(2, 5))
    @settings(max_examples=200, deadline=None)
    def test_arbitrary_assignments_give_valid_tracks(self, seed, n_views):
        rng = np.random.default_rng(seed)
        counts = {v: int(rng.integers(0, 6)) for v in range(n_views)}
        pairwise = []
        for a, b in ring_order(list(range(n_views))):
            k = min(counts[a], counts[b])
            rows = rng.permutation(counts[a])[:k]
            cols = rng.permutation(counts[b])[:k]
            keep = rng.random(k) < 0.8
            pairs = [(int(l), int(m), float(rng.random())) for l, m, s in zip(rows, cols, keep) if s]
            pairwise.append(asg(a, b, pairs, counts[a], counts[b]))
        tracks = merge_multiview(pairwise, counts)
        seen = [(v, d) for p in tracks for v, d in p.members.items()]
        assert sorted(seen) == sorted((v, i) for v in counts for i in range(counts[v]))
        assert len(seen) == len(set(seen))
        # round trip through records keeps the set valid
        assert PersonTrackSet.from_records(tracks.to_records()).to_records() == tracks.to_records()


def test_track_set_rejects_shared_detection():
    from crowdpose3d.matching import PersonTrack

    with pytest.raises(ValueError):
        PersonTrackSet((PersonTrack({0: 1}), PersonTrack({0: 1, 1: 0})))
