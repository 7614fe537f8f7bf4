"""Synthetic scenes with ground truth: roads, landmarks, drifting trajectories, detections.

Everything here is driven by explicit seeds so whole runs are reproducible.
Default landmark densities and per-class detection rates come from a
reference inventory of three urban drives (detections per class and the
share of them that got matched).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import LengthMismatch
from .geometry import SE2, SE3, SegmentChain, normalize_angle
from .markings import MarkingClass as MC
from .model import Feature, Landmark, Match, Pose, Trajectory

# class -> (detections, matched %) for each of the three reference drives
REFERENCE_INVENTORY = {
    MC.CURB_LINE: ((1282, 89.7), (1627, 92.2), (1854, 94.4)),
    MC.DASHED_LINE_12CM: ((408, 80.9), (645, 86.8), (450, 69.3)),
    MC.POLE: ((210, 58.1), (361, 51.8), (163, 61.3)),
    MC.DASHED_LINE_25CM: ((46, 82.6), (89, 84.3), (115, 69.6)),
    MC.LINE_12CM: ((38, 86.8), (36, 83.3), (25, 76.0)),
    MC.ARROW_LINE: ((15, 86.7), (19, 78.9), (32, 78.1)),
    MC.LINE_25CM: ((15, 80.0), (20, 85.0), (14, 78.6)),
    MC.STOP_LINE: ((9, 77.8), (11, 72.7), (19, 78.9)),
    MC.PEDESTRIAN_ROAD_LINE: ((8, 75.0), (9, 77.8), (20, 75.0)),
    MC.ZEBRA_LINE: ((0, 0.0), (14, 78.6), (15, 73.3)),
    MC.BICYCLE_ROAD_LINE: ((3, 100.0), (9, 66.6), (6, 83.3)),
}
REFERENCE_KM = (5.5, 7.5, 6.7)


def reference_densities() -> dict:
    """Detections per km for each class over all three sessions."""
    km = sum(REFERENCE_KM)
    return {c: sum(n for n, _ in rows) / km for c, rows in REFERENCE_INVENTORY.items()}


def reference_detection_rates() -> dict:
    """Count-weighted matched share per class, used as a detection probability."""
    out = {}
    for c, rows in REFERENCE_INVENTORY.items():
        n = sum(k for k, _ in rows)
        out[c] = sum(k * pct for k, pct in rows) / (100.0 * n)
    return out


# lateral placement (in lane widths from the road axis, left positive) and shape
_LAYOUT = {
    MC.DASHED_LINE_12CM: dict(lateral=(0.0,), length=(3.0, 3.0), across=False, crossing=False),
    MC.DASHED_LINE_25CM: dict(lateral=(-0.85, 0.85), length=(2.0, 3.0), across=False, crossing=False),
    MC.LINE_12CM: dict(lateral=(0.0,), length=(8.0, 20.0), across=False, crossing=True),
    MC.LINE_25CM: dict(lateral=(-0.85, 0.85), length=(8.0, 15.0), across=False, crossing=True),
    MC.ARROW_LINE: dict(lateral=(-0.5, 0.5), length=(4.0, 5.0), across=False, crossing=True),
    MC.STOP_LINE: dict(lateral=(-0.5, 0.5), length=(3.0, 3.0), across=True, crossing=True),
    MC.PEDESTRIAN_ROAD_LINE: dict(lateral=(0.0,), length=(6.0, 7.0), across=True, crossing=True),
    MC.ZEBRA_LINE: dict(lateral=(-0.7, -0.35, 0.0, 0.35, 0.7), length=(3.0, 3.0), across=False, crossing=True),
    MC.BICYCLE_ROAD_LINE: dict(lateral=(-0.95, 0.95), length=(5.0, 10.0), across=False, crossing=False),
}


@dataclass
class SceneSpec:
    """Road layout and landmark inventory of a synthetic scene.

    ``road_lengths`` gives one generated road per entry; roads are laid out
    ``road_separation`` metres apart so they never overlap.  Explicit
    ``roads`` (vertex arrays) replace the generated ones.
    """

    road_lengths: tuple = (2000.0,)
    roads: Optional[list] = None
    lane_width: float = 3.5
    densities: Mapping = field(default_factory=reference_densities)
    pole_rule: str = "mixed"  # uniform | intersections | mixed
    intersection_spacing: float = 250.0
    curvature: float = 0.15
    road_separation: float = 500.0
    sessions_per_road: int = 1
    pose_spacing: float = 1.0
    speed: float = 10.0
    landmark_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if any(v < 0 for v in self.densities.values()):
            raise ValueError("densities must be >= 0")
        if self.pole_rule not in ("uniform", "intersections", "mixed"):
            raise ValueError(f"unknown pole rule {self.pole_rule!r}")
        if self.pose_spacing <= 0 or self.lane_width <= 0:
            raise ValueError("pose spacing and lane width must be positive")
        if self.roads is None and (not self.road_lengths or min(self.road_lengths) <= 0):
            raise ValueError("road lengths must be positive")

    @property
    def extent(self) -> float:
        return float(sum(self.road_lengths)) if self.roads is None else float(
            sum(_Road(np.asarray(r, float)).length for r in self.roads)
        )


@dataclass
class DriftSpec:
    """Smooth error of the initial geo-reference.

    A lateral sinusoid ``amplitude * sin(2 pi s / wavelength + phase)`` moves every
    pose sideways, its heading following the distorted path; on top come an extra
    heading sinusoid, a rigid rotation ``heading_bias`` about the first pose and a
    constant world shift ``bias``.
    """

    amplitude: float = 2.0
    wavelength: float = 500.0
    heading_amplitude: float = 0.0
    bias: tuple = (0.0, 0.0)
    heading_bias: float = 0.0

    def __post_init__(self):
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")


@dataclass
class ObservationSpec:
    detection_probability: object = 1.0  # float or {MarkingClass: float}
    sigma: float = 0.0
    max_range: float = 30.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        probs = self.detection_probability
        values = probs.values() if isinstance(probs, Mapping) else [probs]
        if any(not 0.0 <= float(v) <= 1.0 for v in values):
            raise ValueError("detection probabilities must lie in [0, 1]")

    def probability(self, c: MC) -> float:
        probs = self.detection_probability
        if isinstance(probs, Mapping):
            return float(probs.get(c, probs.get(c.value, 1.0)))
        return float(probs)


class _Road:
    """Arc-length parameterised polyline with left normals."""

    def __init__(self, vertices: np.ndarray):
        self.v = np.asarray(vertices, dtype=float)
        seg = np.diff(self.v, axis=0)
        self.s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(seg, axis=1))])
        self.length = float(self.s[-1])
        self.heading_seg = np.arctan2(seg[:, 1], seg[:, 0])

    def point(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return np.stack([np.interp(s, self.s, self.v[:, 0]), np.interp(s, self.s, self.v[:, 1])], axis=-1)

    def heading(self, s) -> np.ndarray:
        k = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.heading_seg) - 1)
        return self.heading_seg[k]

    def offset(self, s, lateral) -> np.ndarray:
        h = self.heading(s)
        n = np.stack([-np.sin(h), np.cos(h)], axis=-1)
        return self.point(s) + np.asarray(lateral)[..., None] * n


def _generate_road(length: float, y0: float, curvature: float, rng: np.random.Generator) -> np.ndarray:
    step = 2.0
    n = max(2, int(math.ceil(length / step)) + 1)
    s = np.linspace(0.0, length, n)
    heading = np.zeros(n)
    for _ in range(3):
        wl = rng.uniform(300.0, 1500.0)
        heading += curvature * rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * s / wl + rng.uniform(0, 2 * np.pi))
    ds = np.diff(s)
    mid = 0.5 * (heading[1:] + heading[:-1])
    xy = np.zeros((n, 2))
    xy[1:, 0] = np.cumsum(ds * np.cos(mid))
    xy[1:, 1] = np.cumsum(ds * np.sin(mid))
    xy[:, 1] += y0
    return xy


def _stations(rng, count: int, length: float, crossings: np.ndarray, near_crossing: bool) -> np.ndarray:
    if count <= 0:
        return np.zeros(0)
    if near_crossing and len(crossings):
        base = rng.choice(crossings, size=count)
        return np.clip(base + rng.uniform(-25.0, 25.0, size=count), 0.0, length)
    return np.sort(rng.uniform(0.0, length, size=count))


def _along_chain(road: _Road, s0: float, length: float, lateral: float) -> np.ndarray:
    s1 = min(road.length, s0 + length)
    s0 = max(0.0, s1 - length)
    k = max(1, int(math.ceil((s1 - s0) / 2.0)))
    ss = np.linspace(s0, s1, k + 1)
    return road.offset(ss, np.full(len(ss), lateral))


def _road_landmarks(road: _Road, scene: SceneSpec, rng: np.random.Generator, prefix: str) -> list[Landmark]:
    w = scene.lane_width
    km = road.length / 1000.0
    crossings = np.arange(scene.intersection_spacing / 2.0, road.length, scene.intersection_spacing)
    out: list[Landmark] = []

    def add(c: MC, geom):
        if scene.landmark_sigma > 0:
            geom = np.asarray(geom, float) + rng.normal(0.0, scene.landmark_sigma, np.shape(geom))
        out.append(Landmark(f"{prefix}{c.value}-{len(out)}", c, geom))

    # curb pieces with random lengths along both road edges
    n_curb = int(round(scene.densities.get(MC.CURB_LINE, 0.0) * km))
    per_side = [n_curb // 2 + n_curb % 2, n_curb // 2]
    for side, n in zip((1.0, -1.0), per_side):
        if n == 0:
            continue
        parts = rng.uniform(0.6, 1.4, size=n)
        bounds = np.concatenate([[0.0], np.cumsum(parts)]) / parts.sum() * road.length
        for a, b in zip(bounds[:-1], bounds[1:]):
            gap = min(0.3, 0.2 * (b - a))
            add(MC.CURB_LINE, _along_chain(road, a + gap / 2, b - a - gap, side * (w + 0.3)))

    n_pole = int(round(scene.densities.get(MC.POLE, 0.0) * km))
    if scene.pole_rule == "uniform":
        split = 0
    elif scene.pole_rule == "intersections":
        split = n_pole
    else:
        split = n_pole // 2
    st = np.concatenate(
        [_stations(rng, split, road.length, crossings, True), _stations(rng, n_pole - split, road.length, crossings, False)]
    )
    for s in st:
        lat = rng.choice([-1.0, 1.0]) * (w + 1.5 + rng.uniform(0.0, 1.5))
        add(MC.POLE, road.offset(s, lat))

    for c, lay in _LAYOUT.items():
        n = int(round(scene.densities.get(c, 0.0) * km))
        if n == 0:
            continue
        if c is MC.DASHED_LINE_12CM:
            pitch = road.length / n
            st = (np.arange(n) + 0.5) * pitch + rng.uniform(-0.2, 0.2, n) * pitch
        else:
            st = _stations(rng, n, road.length, crossings, lay["crossing"])
        for s in st:
            lat = float(rng.choice(lay["lateral"])) * w
            length = rng.uniform(*lay["length"])
            if lay["across"]:
                ends = np.array([lat - length / 2.0, lat + length / 2.0])
                add(c, road.offset(np.full(2, np.clip(s, 0.0, road.length)), ends))
            else:
                add(c, _along_chain(road, s, length, lat))
    return out


def _drive(road: _Road, scene: SceneSpec, session_id: str) -> Trajectory:
    n = max(2, int(math.floor(road.length / scene.pose_spacing)) + 1)
    s = np.arange(n) * scene.pose_spacing
    xy = road.offset(s, np.full(n, -scene.lane_width / 2.0))
    yaw = road.heading(s)
    poses = tuple(
        Pose(session_id, i, float(s[i] / scene.speed), SE3.from_planar(xy[i, 0], xy[i, 1], yaw[i]))
        for i in range(n)
    )
    return Trajectory(session_id, poses)


def generate_scene(scene: SceneSpec) -> tuple[list[Landmark], list[Trajectory]]:
    """Landmarks and ground-truth trajectories for ``scene`` (deterministic per seed)."""
    rng = np.random.default_rng(scene.rng_seed)
    if scene.roads is not None:
        roads = [_Road(np.asarray(r, dtype=float)) for r in scene.roads]
    else:
        roads = [
            _Road(_generate_road(length, k * scene.road_separation, scene.curvature, rng))
            for k, length in enumerate(scene.road_lengths)
        ]
    landmarks: list[Landmark] = []
    trajs: list[Trajectory] = []
    for k, road in enumerate(roads):
        landmarks.extend(_road_landmarks(road, scene, rng, f"r{k}-"))
        for j in range(scene.sessions_per_road):
            trajs.append(_drive(road, scene, f"s{k}" if scene.sessions_per_road == 1 else f"s{k}.{j}"))
    return landmarks, trajs


def perturb_trajectory(gt: Trajectory, d: DriftSpec, rng: np.random.Generator) -> Trajectory:
    """Initial (GNSS-like) trajectory: ground truth warped by a smooth planar error."""
    s = gt.arc_length()
    xy = gt.positions()[:, :2]
    yaw = np.array([p.transform.yaw for p in gt.poses])
    phase = rng.uniform(0.0, 2.0 * np.pi)
    k = 2.0 * np.pi / d.wavelength
    lateral = d.amplitude * np.sin(k * s + phase)
    slope = d.amplitude * k * np.cos(k * s + phase)
    dpsi = np.arctan(slope) + d.heading_amplitude * np.sin(k * s + phase + np.pi / 2.0)
    normal = np.stack([-np.sin(yaw), np.cos(yaw)], axis=1)
    rigid = SE2(d.bias[0], d.bias[1], 0.0) @ SE2(xy[0, 0], xy[0, 1], d.heading_bias) @ SE2(-xy[0, 0], -xy[0, 1], 0.0)
    out = []
    for i, pose in enumerate(gt.poses):
        c = xy[i]
        shift = lateral[i] * normal[i]
        local = SE2(c[0] + shift[0], c[1] + shift[1], dpsi[i]) @ SE2(-c[0], -c[1], 0.0)
        warp = rigid @ local
        if warp.x == 0.0 and warp.y == 0.0 and warp.theta == 0.0:
            out.append(pose.transform)
        else:
            out.append(pose.transform.premultiply_planar(warp))
    return gt.with_transforms(out)


def observe_features(
    gt: Trajectory, landmarks: Sequence[Landmark], o: ObservationSpec
) -> tuple[list[Feature], dict[str, str]]:
    """Detections of the landmarks seen from ``gt``, in the local frame of the nearest pose.

    Returns the features and the ground-truth correspondence feature id -> landmark id.
    """
    rng = np.random.default_rng([o.rng_seed, *map(ord, gt.session_id)])
    pos = gt.positions()
    tree = cKDTree(pos[:, :2])
    features: list[Feature] = []
    truth: dict[str, str] = {}
    for lm in landmarks:
        g = lm.geometry
        pts = g.vertices if isinstance(g, SegmentChain) else np.atleast_2d(g)
        ref = pts.mean(axis=0)
        dist, k = tree.query(ref)
        if np.max(np.linalg.norm(pts - pos[k, :2], axis=1)) > o.max_range:
            continue
        if rng.random() >= o.probability(lm.marking):
            continue
        pose = gt.poses[k].transform
        p3 = np.column_stack([pts, np.zeros(len(pts))])
        local = (p3 - pose.translation) @ pose.rotation
        local = local[:, :2]
        if o.sigma > 0:
            local = local + rng.normal(0.0, o.sigma, local.shape)
        fid = f"{gt.session_id}-f{len(features)}"
        geom = local[0] if lm.is_pole else local
        features.append(Feature(fid, gt.session_id, gt.poses[k].index, lm.marking, geom))
        truth[fid] = lm.id
    return features, truth


# --- evaluation ----------------------------------------------------------------


@dataclass
class ClassStats:
    marking: str
    features: int
    matched: int
    correct: int
    correspondences: int

    @property
    def matched_share(self) -> float:
        return self.matched / self.features if self.features else 0.0

    @property
    def precision(self) -> float:
        return self.correct / self.matched if self.matched else 1.0

    @property
    def recall(self) -> float:
        return self.correct / self.correspondences if self.correspondences else 1.0

    def to_dict(self) -> dict:
        return {
            "class": self.marking,
            "features": self.features,
            "matched": self.matched,
            "matched_share": self.matched_share,
            "precision": self.precision,
            "recall": self.recall,
        }


@dataclass
class AlignmentMetrics:
    position_rmse: float
    position_max: float
    heading_rmse: float
    heading_max: float
    precision: float
    recall: float
    fraction_within: float
    tolerance: float
    n_poses: int
    n_matches: int
    per_class: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "position_rmse": self.position_rmse,
            "position_max": self.position_max,
            "heading_rmse": self.heading_rmse,
            "heading_max": self.heading_max,
            "precision": self.precision,
            "recall": self.recall,
            "fraction_within": self.fraction_within,
            "tolerance": self.tolerance,
            "n_poses": self.n_poses,
            "n_matches": self.n_matches,
            "per_class": [c.to_dict() for c in self.per_class],
        }


def class_table(features: Sequence[Feature], matches: Sequence[Match], truth: Optional[Mapping] = None) -> list[ClassStats]:
    """Per-class detected / matched counts, plus correctness when ground truth is known."""
    truth = truth or {}
    rows = []
    for c in MC:
        ids = {f.id for f in features if f.marking is c}
        if not ids:
            continue
        ms = [m for m in matches if m.feature_id in ids]
        correct = sum(1 for m in ms if truth.get(m.feature_id) == m.landmark_id)
        n_truth = sum(1 for fid in ids if fid in truth)
        rows.append(ClassStats(c.value, len(ids), len(ms), correct, n_truth))
    rows.sort(key=lambda r: -r.features)
    return rows


def evaluate_alignment(
    aligned: Sequence[Trajectory],
    gt: Sequence[Trajectory],
    matches: Sequence[Match],
    gt_correspondences: Mapping[str, str],
    features: Sequence[Feature] = (),
    tolerance: float = 0.2,
) -> AlignmentMetrics:
    """Pose errors against ground truth and match precision/recall."""
    if len(aligned) != len(gt):
        raise LengthMismatch(f"{len(aligned)} aligned vs {len(gt)} ground-truth trajectories")
    pos_err, head_err, weights = [], [], []
    for a, g in zip(aligned, gt):
        if len(a) != len(g):
            raise LengthMismatch(f"session {g.session_id}: {len(a)} vs {len(g)} poses")
        pa, pg = a.positions(), g.positions()
        pos_err.append(np.linalg.norm(pa - pg, axis=1))
        ya = np.array([p.transform.yaw for p in a.poses])
        yg = np.array([p.transform.yaw for p in g.poses])
        head_err.append(np.abs(normalize_angle(ya - yg)))
        seg = np.linalg.norm(np.diff(pg[:, :2], axis=0), axis=1)
        w = np.zeros(len(pg))
        w[:-1] += seg / 2.0
        w[1:] += seg / 2.0
        weights.append(w)
    pe, he, w = np.concatenate(pos_err), np.concatenate(head_err), np.concatenate(weights)
    within = float(w[pe < tolerance].sum() / w.sum()) if w.sum() > 0 else float(np.mean(pe < tolerance))

    correct = sum(1 for m in matches if gt_correspondences.get(m.feature_id) == m.landmark_id)
    precision = correct / len(matches) if matches else 1.0
    recall = correct / len(gt_correspondences) if gt_correspondences else 1.0
    return AlignmentMetrics(
        position_rmse=float(np.sqrt(np.mean(pe**2))),
        position_max=float(pe.max()),
        heading_rmse=float(np.sqrt(np.mean(he**2))),
        heading_max=float(he.max()),
        precision=float(precision),
        recall=float(recall),
        fraction_within=within,
        tolerance=tolerance,
        n_poses=int(len(pe)),
        n_matches=len(matches),
        per_class=class_table(features, matches, gt_correspondences) if features else [],
    )
