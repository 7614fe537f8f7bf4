import math

import numpy as np
import pytest

from _scenes import straight_trajectory
from traj_georef.errors import LengthMismatch
from traj_georef.geometry import SE2, SegmentChain, normalize_angle, se3_minimal
from traj_georef.markings import MarkingClass
from traj_georef.model import Match
from traj_georef.synthbench import (
    REFERENCE_INVENTORY,
    REFERENCE_KM,
    DriftSpec,
    ObservationSpec,
    SceneSpec,
    class_table,
    evaluate_alignment,
    generate_scene,
    observe_features,
    perturb_trajectory,
    reference_densities,
    reference_detection_rates,
)

POLE = MarkingClass.POLE
STRAIGHT_KM = [[[0.0, 0.0], [1000.0, 0.0]]]


def shifted(traj, t: SE2):
    return traj.with_transforms(p.transform.premultiply_planar(t) for p in traj.poses)


# --- reference inventory --------------------------------------------------------------


def test_reference_densities_reproduce_counts():
    dens = reference_densities()
    total_km = sum(REFERENCE_KM)
    for c, rows in REFERENCE_INVENTORY.items():
        assert dens[c] * total_km == pytest.approx(sum(n for n, _ in rows))


def test_reference_detection_rates():
    rates = reference_detection_rates()
    assert all(0.0 <= r <= 1.0 for r in rates.values())
    assert rates[POLE] == pytest.approx((210 * 0.581 + 361 * 0.518 + 163 * 0.613) / 734)


# --- generate_scene ------------------------------------------------------------------------


def test_zero_densities_give_empty_scene_with_trajectories():
    lms, gts = generate_scene(SceneSpec(road_lengths=(500.0,), densities={}))
    assert lms == []
    assert len(gts) == 1 and len(gts[0]) == 501


def test_straight_km_pole_density():
    lms, gts = generate_scene(SceneSpec(roads=STRAIGHT_KM, densities={POLE: 20.0}))
    assert 18 <= len(lms) <= 22
    assert all(lm.marking is POLE for lm in lms)


def test_trajectory_follows_lane_at_fixed_spacing():
    _, gts = generate_scene(SceneSpec(roads=STRAIGHT_KM, densities={}))
    pos = gts[0].positions()
    assert np.allclose(np.diff(pos[:, 0]), 1.0)
    assert np.allclose(pos[:, 1], -3.5 / 2)


@pytest.mark.parametrize("seed", range(3))
def test_landmark_counts_follow_densities(seed):
    scene = SceneSpec(road_lengths=(2000.0,), rng_seed=seed)
    lms, _ = generate_scene(scene)
    km = 2.0
    for c, d in scene.densities.items():
        expected = d * km
        if expected < 10:
            continue
        n = sum(lm.marking is c for lm in lms)
        assert abs(n - expected) <= 0.1 * expected, c


def test_generate_scene_deterministic():
    a = generate_scene(SceneSpec(road_lengths=(800.0, 400.0), rng_seed=4))
    b = generate_scene(SceneSpec(road_lengths=(800.0, 400.0), rng_seed=4))
    assert [lm.id for lm in a[0]] == [lm.id for lm in b[0]]
    for x, y in zip(a[0], b[0]):
        gx = x.geometry.vertices if isinstance(x.geometry, SegmentChain) else x.geometry
        gy = y.geometry.vertices if isinstance(y.geometry, SegmentChain) else y.geometry
        assert np.array_equal(gx, gy)
    assert all(np.array_equal(s.positions(), t.positions()) for s, t in zip(a[1], b[1]))


def test_roads_do_not_overlap():
    _, gts = generate_scene(SceneSpec(road_lengths=(1000.0, 1000.0)))
    a, b = gts[0].positions()[:, :2], gts[1].positions()[:, :2]
    d = np.min(np.linalg.norm(a[:, None, :] - b[None, ::10, :], axis=2))
    assert d > 100.0


def test_scene_validation():
    with pytest.raises(ValueError):
        SceneSpec(densities={POLE: -1.0})
    with pytest.raises(ValueError):
        SceneSpec(road_lengths=(0.0,))
    with pytest.raises(ValueError):
        DriftSpec(wavelength=0.0)
    with pytest.raises(ValueError):
        ObservationSpec(sigma=-0.1)
    with pytest.raises(ValueError):
        ObservationSpec(detection_probability={POLE: 1.5})


# --- perturb_trajectory ----------------------------------------------------------------------


def test_zero_drift_is_identity():
    gt = straight_trajectory(300.0)
    out = perturb_trajectory(gt, DriftSpec(amplitude=0.0), np.random.default_rng(0))
    for a, b in zip(out.poses, gt.poses):
        assert np.array_equal(a.transform.matrix(), b.transform.matrix())


def test_constant_bias_shifts_x():
    gt = straight_trajectory(300.0, heading=0.4)
    out = perturb_trajectory(gt, DriftSpec(amplitude=0.0, bias=(2.0, 0.0)), np.random.default_rng(0))
    assert np.allclose(out.positions() - gt.positions(), [2.0, 0.0, 0.0], atol=1e-12)
    for a, b in zip(out.poses, gt.poses):
        assert np.allclose(a.transform.rotation, b.transform.rotation, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_sinusoid_extremum(seed):
    gt = straight_trajectory(600.0)
    out = perturb_trajectory(gt, DriftSpec(amplitude=2.0, wavelength=500.0), np.random.default_rng(seed))
    err = np.linalg.norm(out.positions() - gt.positions(), axis=1)
    assert 1.9 <= err.max() <= 2.1


@pytest.mark.parametrize("seed", range(3))
def test_drift_preserves_local_shape(seed):
    _, gts = generate_scene(SceneSpec(road_lengths=(1500.0,), densities={}, rng_seed=seed))
    gt = gts[0]
    d = DriftSpec(amplitude=2.0, wavelength=500.0, heading_bias=math.radians(1.0), bias=(3.0, -1.0))
    out = perturb_trajectory(gt, d, np.random.default_rng(seed))
    bound = d.amplitude * 2.0 * math.pi * 1.0 / d.wavelength
    worst_t = worst_r = 0.0
    for (g0, g1), (o0, o1) in zip(zip(gt.poses, gt.poses[1:]), zip(out.poses, out.poses[1:])):
        rg = g0.transform.inverse() @ g1.transform
        ro = o0.transform.inverse() @ o1.transform
        diff = rg.inverse() @ ro
        worst_t = max(worst_t, float(np.linalg.norm(diff.translation)))
        worst_r = max(worst_r, float(np.linalg.norm(se3_minimal(diff)[3:])))
    assert worst_t < bound and worst_r < bound


def test_heading_bias_rotates_about_first_pose():
    gt = straight_trajectory(100.0)
    out = perturb_trajectory(gt, DriftSpec(amplitude=0.0, heading_bias=math.radians(2.0)), np.random.default_rng(0))
    assert np.allclose(out.poses[0].transform.translation, gt.poses[0].transform.translation)
    end = out.positions()[-1, :2]
    assert np.allclose(end, [100.0 * math.cos(math.radians(2.0)), 100.0 * math.sin(math.radians(2.0))])


# --- observe_features ------------------------------------------------------------------------


def world_of(feature, gt):
    pose = gt.poses[gt.index_map()[feature.pose_index]].transform
    g = feature.geometry.vertices if isinstance(feature.geometry, SegmentChain) else np.atleast_2d(feature.geometry)
    return pose.apply(np.column_stack([g, np.zeros(len(g))]))[:, :2]


def test_noiseless_round_trip():
    lms, gts = generate_scene(SceneSpec(road_lengths=(800.0,), rng_seed=2))
    feats, truth = observe_features(gts[0], lms, ObservationSpec(sigma=0.0))
    assert len(feats) == len(lms) and len(truth) == len(feats)
    by_id = {lm.id: lm for lm in lms}
    for f in feats:
        lm = by_id[truth[f.id]]
        g = lm.geometry.vertices if isinstance(lm.geometry, SegmentChain) else np.atleast_2d(lm.geometry)
        assert np.max(np.abs(world_of(f, gts[0]) - g)) < 1e-9
        assert f.marking is lm.marking


def test_pole_dropout():
    lms, gts = generate_scene(SceneSpec(road_lengths=(800.0,)))
    feats, _ = observe_features(gts[0], lms, ObservationSpec(detection_probability={POLE: 0.0}))
    assert not any(f.marking is POLE for f in feats)
    assert len(feats) == sum(lm.marking is not POLE for lm in lms)


def test_sensing_range():
    lms, gts = generate_scene(SceneSpec(roads=STRAIGHT_KM, densities={POLE: 50.0}))
    feats, _ = observe_features(gts[0], lms, ObservationSpec(max_range=5.0))
    assert all(np.linalg.norm(f.geometry) <= 5.0 for f in feats)
    assert 0 < len(feats) < len(lms)


def test_pole_noise_rayleigh_mean():
    sigma = 0.05
    lms, gts = generate_scene(SceneSpec(road_lengths=(2000.0,), densities={POLE: 300.0}, rng_seed=1))
    feats, truth = observe_features(gts[0], lms, ObservationSpec(sigma=sigma, rng_seed=3))
    assert len(feats) >= 500
    by_id = {lm.id: lm for lm in lms}
    err = [np.linalg.norm(world_of(f, gts[0])[0] - by_id[truth[f.id]].geometry) for f in feats]
    assert np.mean(err) == pytest.approx(sigma * math.sqrt(math.pi / 2), rel=0.1)


def test_observation_deterministic():
    lms, gts = generate_scene(SceneSpec(road_lengths=(500.0,)))
    o = ObservationSpec(sigma=0.05, detection_probability=0.5, rng_seed=9)
    a, ta = observe_features(gts[0], lms, o)
    b, tb = observe_features(gts[0], lms, o)
    assert ta == tb
    assert all(np.array_equal(world_of(x, gts[0]), world_of(y, gts[0])) for x, y in zip(a, b))


# --- evaluation ------------------------------------------------------------------------------


def test_evaluate_identity():
    gt = straight_trajectory(200.0)
    m = evaluate_alignment([gt], [gt], [], {})
    assert m.position_rmse == 0.0 and m.heading_rmse == 0.0 and m.fraction_within == 1.0


def test_evaluate_constant_offset():
    gt = straight_trajectory(200.0, heading=0.3)
    m = evaluate_alignment([shifted(gt, SE2(0.6, 0.8, 0.0))], [gt], [], {})
    assert m.position_rmse == pytest.approx(1.0, abs=1e-12)
    assert m.position_max == pytest.approx(1.0, abs=1e-12)
    assert m.fraction_within == 0.0


def test_evaluate_fraction_is_arc_weighted():
    gt = straight_trajectory(100.0)
    half = gt.with_transforms(
        p.transform.premultiply_planar(SE2(0.0, 1.0 if k > 50 else 0.0, 0.0)) for k, p in enumerate(gt.poses)
    )
    m = evaluate_alignment([half], [gt], [], {})
    assert m.fraction_within == pytest.approx(0.505)
    assert m.position_rmse <= m.position_max


def test_evaluate_heading_error():
    gt = straight_trajectory(50.0)
    rot = gt.with_transforms(p.transform @ p.transform.from_planar(0.0, 0.0, 0.01) for p in gt.poses)
    m = evaluate_alignment([rot], [gt], [], {})
    assert m.heading_rmse == pytest.approx(0.01) and m.position_rmse == 0.0
    assert abs(normalize_angle(m.heading_max - 0.01)) < 1e-12


def test_precision_recall():
    gt = straight_trajectory(10.0)
    truth = {"f0": "l0", "f1": "l1", "f2": "l2", "f3": "l3"}
    perfect = [Match(f, l, 0.0) for f, l in truth.items()]
    m = evaluate_alignment([gt], [gt], perfect, truth)
    assert m.precision == 1.0 and m.recall == 1.0
    partial = [Match("f0", "l0", 0.0), Match("f1", "l2", 0.0)]
    m = evaluate_alignment([gt], [gt], partial, truth)
    assert m.precision == 0.5 and m.recall == 0.25


def test_length_mismatch():
    a, b = straight_trajectory(10.0), straight_trajectory(12.0)
    with pytest.raises(LengthMismatch):
        evaluate_alignment([a], [b], [], {})
    with pytest.raises(LengthMismatch):
        evaluate_alignment([a, a], [a], [], {})


def test_class_table_counts():
    lms, gts = generate_scene(SceneSpec(road_lengths=(500.0,)))
    feats, truth = observe_features(gts[0], lms, ObservationSpec())
    matches = [Match(f.id, truth[f.id], 0.0) for f in feats if f.marking is POLE]
    rows = {r.marking: r for r in class_table(feats, matches, truth)}
    assert rows["pole"].matched_share == 1.0 and rows["pole"].precision == 1.0
    assert rows["curb_line"].matched == 0 and rows["curb_line"].recall == 0.0
    assert sum(r.features for r in rows.values()) == len(feats)
