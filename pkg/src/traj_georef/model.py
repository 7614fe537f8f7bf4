"""Domain objects shared by matching, alignment and file IO."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Union

import numpy as np

from .errors import ValidationError
from .geometry import SE2, SE3, SegmentChain
from .markings import SEGMENT_CLASSES, MarkingClass

__all__ = [
    "MarkingClass",
    "SEGMENT_CLASSES",
    "Pose",
    "Trajectory",
    "Feature",
    "Landmark",
    "Match",
    "MatchParams",
    "feature_world_position",
    "local_to_world_xy",
]

MAX_POSE_SPACING = 100.0
MAX_LOCAL_RANGE = 200.0


@dataclass(frozen=True, eq=False)
class Pose:
    session_id: str
    index: int
    timestamp: float
    transform: SE3


@dataclass(frozen=True, eq=False)
class Trajectory:
    session_id: str
    poses: tuple[Pose, ...]

    def __post_init__(self):
        poses = tuple(self.poses)
        object.__setattr__(self, "poses", poses)
        if len(poses) < 2:
            raise ValidationError(f"trajectory {self.session_id!r} needs at least 2 poses")
        for prev, cur in zip(poses, poses[1:]):
            if cur.session_id != self.session_id:
                raise ValidationError(f"pose {cur.index} belongs to session {cur.session_id!r}")
            if cur.index <= prev.index:
                raise ValidationError(
                    f"trajectory {self.session_id!r}: pose indices not strictly increasing at {cur.index}"
                )
            if cur.timestamp < prev.timestamp:
                raise ValidationError(
                    f"trajectory {self.session_id!r}: timestamp decreases at pose {cur.index}"
                )
        steps = np.linalg.norm(np.diff(self.positions(), axis=0), axis=1)
        bad = np.flatnonzero(~(steps < MAX_POSE_SPACING))
        if len(bad):
            k = bad[0]
            raise ValidationError(
                f"trajectory {self.session_id!r}: {steps[k]:.1f} m jump before pose {poses[k + 1].index}"
            )

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.transform.translation for p in self.poses])

    def arc_length(self) -> np.ndarray:
        """Cumulative planar arc length at each pose."""
        xy = self.positions()[:, :2]
        return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))])

    def index_map(self) -> dict[int, int]:
        return {p.index: k for k, p in enumerate(self.poses)}

    def with_transforms(self, transforms: Iterable[SE3]) -> "Trajectory":
        return Trajectory(
            self.session_id,
            tuple(Pose(p.session_id, p.index, p.timestamp, t) for p, t in zip(self.poses, transforms)),
        )


LocalGeometry = Union[np.ndarray, SegmentChain]


def _check_kind(obj_id: str, marking: MarkingClass, geometry) -> LocalGeometry:
    if marking.is_pole:
        if isinstance(geometry, SegmentChain):
            raise ValidationError(f"{obj_id}: pole class needs a point geometry")
        g = np.array(geometry, dtype=float).reshape(-1)
        if g.shape != (2,):
            raise ValidationError(f"{obj_id}: pole point must have 2 coordinates")
        if not np.all(np.isfinite(g)):
            raise ValidationError(f"{obj_id}: non-finite coordinates")
        g.setflags(write=False)
        return g
    if not isinstance(geometry, SegmentChain):
        try:
            geometry = SegmentChain(geometry, marking)
        except ValueError as exc:
            raise ValidationError(f"{obj_id}: {exc}") from None
    if geometry.marking is not marking:
        raise ValidationError(f"{obj_id}: chain class {geometry.marking} != {marking}")
    if not np.all(np.isfinite(geometry.vertices)):
        raise ValidationError(f"{obj_id}: non-finite coordinates")
    return geometry


@dataclass(frozen=True, eq=False)
class Feature:
    """A pole or marking chain detected from the vehicle, in its anchor pose's frame."""

    id: str
    session_id: str
    pose_index: int
    marking: MarkingClass
    geometry: LocalGeometry

    def __post_init__(self):
        marking = MarkingClass(self.marking)
        object.__setattr__(self, "marking", marking)
        g = _check_kind(self.id, marking, self.geometry)
        object.__setattr__(self, "geometry", g)
        pts = g.vertices if isinstance(g, SegmentChain) else g[None]
        if np.max(np.linalg.norm(pts, axis=1)) >= MAX_LOCAL_RANGE:
            raise ValidationError(f"feature {self.id}: local coordinates beyond {MAX_LOCAL_RANGE} m")

    @property
    def is_pole(self) -> bool:
        return self.marking.is_pole

    @property
    def anchor(self) -> tuple[str, int]:
        return (self.session_id, self.pose_index)


@dataclass(frozen=True, eq=False)
class Landmark:
    """Pole or marking chain labelled in the geo-referenced aerial image (world frame)."""

    id: str
    marking: MarkingClass
    geometry: LocalGeometry

    def __post_init__(self):
        marking = MarkingClass(self.marking)
        object.__setattr__(self, "marking", marking)
        object.__setattr__(self, "geometry", _check_kind(self.id, marking, self.geometry))

    @property
    def is_pole(self) -> bool:
        return self.marking.is_pole

    def reference_point(self) -> np.ndarray:
        g = self.geometry
        return g.vertices.mean(axis=0) if isinstance(g, SegmentChain) else g


@dataclass(frozen=True)
class Match:
    feature_id: str
    landmark_id: str
    distance: float


@dataclass(frozen=True)
class MatchParams:
    """Tuning for the windowed association. None of the defaults come from measurements."""

    window_length: float = 100.0
    window_overlap: float = 0.5
    inlier_threshold: float = 1.0
    # absolute E_limit; when None it is e_limit_per_feature * (features in the window)
    e_limit: Optional[float] = None
    e_limit_per_feature: float = 0.3
    max_hypotheses: int = 500
    gate_angle: float = math.radians(1.0)
    gate_translation: float = 1.0
    w_h: float = 1.0
    landmark_search_radius: Optional[float] = None
    # a feature may only be hypothesised onto landmarks this close to its predicted position
    candidate_radius: float = 5.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.window_overlap < 1.0:
            raise ValidationError("window_overlap must lie in (0, 1)")
        if self.window_length <= 0:
            raise ValidationError("window_length must be positive")
        if self.inlier_threshold <= 0:
            raise ValidationError("inlier_threshold must be positive")
        if self.e_limit is not None and self.e_limit <= 0:
            raise ValidationError("e_limit must be positive")
        if self.e_limit_per_feature <= 0:
            raise ValidationError("e_limit_per_feature must be positive")
        if self.max_hypotheses < 1:
            raise ValidationError("max_hypotheses must be >= 1")
        if self.gate_angle <= 0 or self.gate_translation <= 0:
            raise ValidationError("gate thresholds must be positive")
        if self.candidate_radius <= 0:
            raise ValidationError("candidate_radius must be positive")

    @property
    def stride(self) -> float:
        return self.window_length * (1.0 - self.window_overlap)

    @property
    def search_radius(self) -> float:
        if self.landmark_search_radius is not None:
            return self.landmark_search_radius
        return self.window_length / 2.0 + 10.0

    def limit_for(self, n_features: int) -> float:
        if self.e_limit is not None:
            return self.e_limit
        return self.e_limit_per_feature * n_features


def local_to_world_xy(pose: SE3, local_xy: np.ndarray) -> np.ndarray:
    """Lift ground points (z = 0) from the pose frame into the world and drop z."""
    p = np.asarray(local_xy, dtype=float).reshape(-1, 2)
    r = pose.rotation
    return p @ r[:2, :2].T + pose.translation[:2]


def feature_world_position(f: Feature, pose: SE3) -> LocalGeometry:
    """World XY geometry of a feature given the current estimate of its anchor pose."""
    g = f.geometry
    if isinstance(g, SegmentChain):
        return SegmentChain(local_to_world_xy(pose, g.vertices), g.marking)
    return local_to_world_xy(pose, g)[0]


def planar_transform_pose(pose: SE3, t: SE2) -> SE3:
    return pose.premultiply_planar(t)
