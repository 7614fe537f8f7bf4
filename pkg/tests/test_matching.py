import math

import numpy as np
import pytest

from _oracles import all_two_pair_hypotheses, hausdorff, procrustes_2d, window_cost
from _scenes import (
    POLE,
    pole_feature_at,
    random_window_scene,
    straight_trajectory,
    window_problem,
)
from traj_georef.errors import EmptyInput, InsufficientCandidates
from traj_georef.geometry import SE2, SegmentChain
from traj_georef.markings import MarkingClass
from traj_georef.matching import (
    CONVERGED,
    INSUFFICIENT,
    REJECTED,
    Hypothesis,
    build_windows,
    consistency_gate,
    enumerate_hypotheses,
    evaluate_transform,
    fit_local_transform,
    fit_pairs,
    hypothesis_count,
    initial_world_geometry,
    match_all,
    match_window,
    reference_point,
    sample_hypothesis,
    unassigned_features,
)
from traj_georef.model import Landmark, MatchParams
from traj_georef.synthbench import ObservationSpec, SceneSpec, generate_scene, observe_features


# --- windows ------------------------------------------------------------------


def test_window_centers_symmetric_with_stride():
    traj = straight_trajectory(230.0)
    ws = build_windows([traj], [], [], MatchParams())
    xs = [w.center[0] for w in ws]
    assert np.allclose(xs, [15.0, 65.0, 115.0, 165.0, 215.0])
    assert all(w.half_extent == 50.0 for w in ws)


def test_window_stride_example():
    ws = build_windows([straight_trajectory(100.0)], [], [], MatchParams(window_length=40.0))
    assert np.allclose([w.center[0] for w in ws], [10.0, 30.0, 50.0, 70.0, 90.0])


def test_short_trajectory_single_window():
    traj = straight_trajectory(60.0)
    ws = build_windows([traj], [], [], MatchParams())
    assert len(ws) == 1 and np.allclose(ws[0].center, [30.0, 0.0])


def test_windows_collect_features_and_landmarks():
    traj = straight_trajectory(230.0)
    feats = [pole_feature_at(traj, f"f{x}", (x, 4.0)) for x in (10.0, 60.0, 200.0)]
    lms = [Landmark(f"l{x}", POLE, (x, 4.0)) for x in (10.0, 60.0, 200.0)]
    ws = build_windows([traj], feats, lms, MatchParams())
    assert ws[0].feature_ids == ("f10.0", "f60.0")
    assert "f60.0" in ws[1].feature_ids and "f10.0" not in ws[2].feature_ids
    assert set(ws[0].landmark_ids) == {"l10.0", "l60.0"}
    assert unassigned_features(ws, feats) == []


def test_windows_rotate_with_the_scene():
    # the same layout along a diagonal road yields the same window membership
    p = MatchParams()
    feats_xy = [(10.0, 4.0), (49.0, -4.0), (51.0, 4.0), (120.0, 6.0)]
    results = []
    for heading in (0.0, math.radians(37.0)):
        traj = straight_trajectory(150.0, heading=heading)
        rot = SE2(0.0, 0.0, heading)
        feats = [pole_feature_at(traj, f"f{k}", rot.apply(np.array(xy))) for k, xy in enumerate(feats_xy)]
        results.append([w.feature_ids for w in build_windows([traj], feats, [], p)])
    assert results[0] == results[1]


def test_build_windows_needs_trajectories():
    with pytest.raises(EmptyInput):
        build_windows([], [], [], MatchParams())


# --- hypotheses -----------------------------------------------------------------


def test_hypothesis_requires_distinct_items():
    with pytest.raises(ValueError):
        Hypothesis((("f1", "l1"), ("f1", "l2")))
    with pytest.raises(ValueError):
        Hypothesis((("f1", "l1"), ("f2", "l1")))


@pytest.mark.parametrize("seed", range(10))
def test_hypothesis_count_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    cands = [sorted(set(rng.integers(0, 5, rng.integers(0, 4)).tolist())) for _ in range(rng.integers(0, 6))]
    listed = list(enumerate_hypotheses(cands))
    assert len(listed) == hypothesis_count(cands) == len(set(listed))
    assert all(li != lj for _, li, _, lj in listed)


def test_candidates_respect_class_and_radius():
    w = window_problem(
        [np.array([0.0, 0.0]), np.array([[0, 1], [3, 1]])],
        [POLE, MarkingClass.CURB_LINE],
        [np.array([1.0, 0.0]), np.array([20.0, 0.0]), np.array([[0, 1.5], [3, 1.5]]), np.array([[0, 1], [3, 1]])],
        [POLE, POLE, MarkingClass.CURB_LINE, MarkingClass.STOP_LINE],
    )
    assert w.candidates() == [[0], [2]]
    assert w.candidates(SE2(19.0, 0.0, 0.0)) == [[1], []]


def test_sample_hypothesis_and_insufficient():
    rng = np.random.default_rng(0)
    w = window_problem([np.zeros(2), np.ones(2)], [POLE, POLE], [np.zeros(2), np.ones(2)], [POLE, POLE])
    h = sample_hypothesis(w, rng)
    assert {h.pairs[0][0], h.pairs[1][0]} == {"f0", "f1"}
    lonely = window_problem([np.zeros(2)], [POLE], [np.zeros(2)], [POLE])
    with pytest.raises(InsufficientCandidates):
        sample_hypothesis(lonely, rng)
    none = window_problem([np.zeros(2), np.ones(2)], [POLE, POLE], [np.zeros(2)], [POLE])
    with pytest.raises(InsufficientCandidates):
        sample_hypothesis(none, rng)


# --- local fit ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_pole_pair_fit_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-50, 50, (2, 2))
    truth = SE2(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-0.2, 0.2))
    q = truth.apply(p) + rng.normal(0, 0.3, (2, 2))
    w = window_problem(list(p), [POLE, POLE], list(q), [POLE, POLE])
    t = fit_local_transform(w, Hypothesis((("f0", "l0"), ("f1", "l1"))))
    x, y, th = procrustes_2d(p, q)
    assert abs(t.theta - th) < 1e-6
    assert abs(t.x - x) < 1e-6 and abs(t.y - y) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_pole_pair_fit_far_from_origin(seed):
    # compare where the fitted transform puts the features; its translation
    # parameter alone is dominated by the lever arm to the origin
    rng = np.random.default_rng(seed)
    p = rng.uniform(-30, 30, (2, 2)) + [5.0e3, -2.0e3]
    q = SE2(1.0, -2.0, 0.05).apply(p) + rng.normal(0, 0.3, (2, 2))
    w = window_problem(list(p), [POLE, POLE], list(q), [POLE, POLE])
    t = fit_local_transform(w, Hypothesis((("f0", "l0"), ("f1", "l1"))))
    x, y, th = procrustes_2d(p, q)
    assert abs(t.theta - th) < 1e-6
    assert np.max(np.abs(t.apply(p) - SE2(x, y, th).apply(p))) < 1e-6


def test_fit_pairs_recovers_chain_transform():
    truth = SE2(1.5, -0.8, math.radians(10))
    l1 = SegmentChain([[0, 0], [6, 0], [8, 3]], MarkingClass.CURB_LINE)
    l2 = SegmentChain([[2, 5], [2, 9]], MarkingClass.STOP_LINE)
    inv = truth.inverse()
    pairs = [(l1.transformed(inv), l1), (l2.transformed(inv), l2)]
    t, cost = fit_pairs(pairs)
    assert cost < 1e-16
    assert np.allclose(t.as_tuple(), truth.as_tuple(), atol=1e-7)


def test_fit_with_prior_includes_prior():
    p = np.array([[0.0, 0.0], [10.0, 0.0]])
    prior = SE2(3.0, 0.0, 0.0)
    q = SE2(3.2, 0.1, 0.01).apply(p)
    w = window_problem(list(p), [POLE, POLE], list(q), [POLE, POLE])
    t = fit_local_transform(w, Hypothesis((("f0", "l0"), ("f1", "l1"))), prior)
    assert np.allclose(t.apply(p), q, atol=1e-9)


# --- scoring ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(15))
def test_score_matches_loop_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    fg, fc, lg, lc, truth = random_window_scene(rng, noise=0.2)
    p = MatchParams()
    w = window_problem(fg, fc, lg, lc, p)
    inliers, e_f = evaluate_transform(w, truth)

    def dist(g, h, w_h):
        if np.ndim(h) == 2:
            return w_h * hausdorff(g, h)
        return math.hypot(*(np.asarray(g) - h))

    expect, e_exp = window_cost(fg, fc, lg, lc, lambda g: truth.apply(g), p.inlier_threshold, p.w_h, dist)
    assert {(int(m.feature_id[1:]), int(m.landmark_id[1:])) for m in inliers} == expect
    assert e_f == pytest.approx(e_exp, abs=1e-9)


def test_score_counts_outliers_at_threshold():
    w = window_problem([np.zeros(2), np.array([5.0, 0.0])], [POLE, POLE], [np.array([0.3, 0.4])], [POLE])
    inliers, e_f = evaluate_transform(w, SE2())
    assert [(m.feature_id, m.landmark_id) for m in inliers] == [("f0", "l0")]
    assert e_f == pytest.approx(0.5 + 1.0)
    _, e_f2 = evaluate_transform(w, SE2(), MatchParams(inlier_threshold=0.4))
    assert e_f2 == pytest.approx(0.8)


# --- gate ---------------------------------------------------------------------------------


def test_consistency_gate():
    p = MatchParams(gate_angle=math.radians(1.0), gate_translation=1.0)
    base = SE2(5.0, 2.0, 0.1)
    assert consistency_gate(None, SE2(100.0, 0.0, 1.0), p)
    assert consistency_gate(base, base @ SE2(0.5, 0.5, 0.0), p, pivot=(0, 0))
    assert not consistency_gate(base, SE2(0.0, 1.5, 0.0) @ base, p, pivot=(0, 0))
    assert not consistency_gate(base, base @ SE2(0.0, 0.0, math.radians(1.5)), p)
    assert consistency_gate(base, base @ SE2(0.0, 0.0, math.radians(1.5)), p, scale=2.0)


def test_gate_translation_measured_at_pivot():
    # a small rotation about a far pivot moves that pivot a lot
    p = MatchParams(gate_angle=math.radians(1.0), gate_translation=1.0)
    rot = SE2(0.0, 0.0, math.radians(0.9))
    assert consistency_gate(SE2(), rot, p, pivot=(0.0, 0.0))
    assert not consistency_gate(SE2(), rot, p, pivot=(500.0, 0.0))


def test_match_window_rejects_gated_shift():
    # every feature sits 3 m from its landmark; only a 3 m correction explains it
    xs = np.array([[0.0, 4.0], [7.0, -4.0], [13.0, 4.0], [22.0, -5.0]])
    w = window_problem(list(xs), [POLE] * 4, list(xs + [3.0, 0.0]), [POLE] * 4)
    p = MatchParams()
    free = match_window(w, None, p, np.random.default_rng(0))
    assert free.status == CONVERGED and len(free.inliers) == 4
    assert np.allclose(free.transform.as_tuple(), (3.0, 0.0, 0.0), atol=1e-9)
    gated = match_window(w, SE2(), p, np.random.default_rng(0))
    assert gated.status == REJECTED and gated.inliers == [] and gated.transform is None


def test_match_window_insufficient():
    w = window_problem([np.zeros(2)], [POLE], [np.zeros(2)], [POLE])
    res = match_window(w, None, MatchParams(), np.random.default_rng(0))
    assert res.status == INSUFFICIENT and res.inliers == []


@pytest.mark.parametrize("seed", range(8))
def test_exhaustive_search_equals_brute_force(seed):
    rng = np.random.default_rng(seed)
    fg, fc, lg, lc, _ = random_window_scene(rng)
    p = MatchParams(candidate_radius=1e6, max_hypotheses=10**6, e_limit=1e-300)
    w = window_problem(fg, fc, lg, lc, p)
    res = match_window(w, None, p, np.random.default_rng(seed))
    best = None
    for i, li, j, lj in all_two_pair_hypotheses(fc, lc):
        t = fit_local_transform(w, Hypothesis(((f"f{i}", f"l{li}"), (f"f{j}", f"l{lj}"))))
        inl, e = evaluate_transform(w, t)
        if best is None or e < best[0]:
            best = (e, {(m.feature_id, m.landmark_id) for m in inl})
    if best is None:
        assert res.status == INSUFFICIENT
        return
    assert res.e_f == pytest.approx(best[0], abs=1e-9)
    assert {(m.feature_id, m.landmark_id) for m in res.inliers} == best[1]


# --- whole-trajectory matching ------------------------------------------------------------


@pytest.fixture(scope="module")
def small_scene():
    lms, gts = generate_scene(SceneSpec(road_lengths=(600.0,), rng_seed=5))
    feats, truth = observe_features(gts[0], lms, ObservationSpec(sigma=0.03, rng_seed=6))
    shifted = gts[0].with_transforms(p.transform.premultiply_planar(SE2(1.2, -0.7, 0.004)) for p in gts[0].poses)
    return lms, gts, shifted, feats, truth


def test_match_all_finds_true_correspondences(small_scene):
    lms, _, init, feats, truth = small_scene
    matches, results = match_all([init], feats, lms, MatchParams())
    assert all(r.status == CONVERGED for r in results)
    correct = sum(truth[m.feature_id] == m.landmark_id for m in matches)
    assert correct / len(matches) >= 0.99
    assert correct / len(truth) >= 0.95
    assert len({m.feature_id for m in matches}) == len(matches)


def test_match_all_deterministic(small_scene):
    lms, _, init, feats, _ = small_scene
    a, _ = match_all([init], feats, lms, MatchParams(rng_seed=3))
    b, _ = match_all([init], feats, lms, MatchParams(rng_seed=3))
    assert [(m.feature_id, m.landmark_id, m.distance) for m in a] == [(m.feature_id, m.landmark_id, m.distance) for m in b]


def test_match_all_keeps_match_from_nearest_window(small_scene):
    lms, _, init, feats, _ = small_scene
    p = MatchParams()
    matches, results = match_all([init], feats, lms, p)
    windows = {w.id: w for w in build_windows([init], feats, lms, p)}
    world = initial_world_geometry([init], feats)
    chosen = {m.feature_id: m.landmark_id for m in matches}
    for fid in list(chosen)[::25]:
        ref = reference_point(world[fid])
        holders = [r for r in results if r.status == CONVERGED and any(m.feature_id == fid for m in r.inliers)]
        nearest = min(holders, key=lambda r: (np.linalg.norm(ref - windows[r.window_id].center), r.window_id))
        assert chosen[fid] == next(m.landmark_id for m in nearest.inliers if m.feature_id == fid)


def test_match_all_without_landmarks(small_scene):
    _, _, init, feats, _ = small_scene
    matches, results = match_all([init], feats, [], MatchParams())
    assert matches == [] and all(r.status == INSUFFICIENT for r in results)


def test_match_all_needs_trajectories():
    with pytest.raises(EmptyInput):
        match_all([], [], [], MatchParams())
