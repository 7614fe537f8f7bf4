"""Rigid transforms in the plane and in space, plus the feature distance measures.

Conventions:
    * ``SE2(x, y, theta)`` maps a point p to ``R(theta) @ p + (x, y)``.
    * ``a @ b`` (or ``se2_compose(a, b)``) applies ``b`` first, then ``a``.
    * ``SE3`` stores a rotation matrix and a translation; the same composition
      order applies.
    * The minimal pose vector is ``(tx, ty, tz, rx, ry, rz)``: the translation
      copied verbatim followed by the rotation vector (angle in [0, pi]).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import IncompatibleMatch
from .markings import MarkingClass

HAUSDORFF_STEP = 0.25

Point2 = np.ndarray


def normalize_angle(a):
    """Wrap angle(s) into (-pi, pi]."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class SE2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @classmethod
    def identity(cls) -> "SE2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "SE2":
        m = np.asarray(m, dtype=float)
        return cls(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def rotation(self) -> np.ndarray:
        return rot2(self.theta)

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def compose(self, other: "SE2") -> "SE2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return SE2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    __matmul__ = compose

    def inverse(self) -> "SE2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return SE2(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.theta)

    def apply(self, points) -> np.ndarray:
        """Transform one point (shape (2,)) or an array of points (shape (..., 2))."""
        p = np.asarray(points, dtype=float)
        c, s = math.cos(self.theta), math.sin(self.theta)
        out = np.empty_like(p)
        out[..., 0] = c * p[..., 0] - s * p[..., 1] + self.x
        out[..., 1] = s * p[..., 0] + c * p[..., 1] + self.y
        return out

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


def se2_compose(a: SE2, b: SE2) -> SE2:
    return a.compose(b)


def se2_apply(t: SE2, p) -> np.ndarray:
    return t.apply(p)


def se2_about(pivot, dx: float, dy: float, dtheta: float) -> SE2:
    """Rotation by ``dtheta`` about ``pivot`` followed by a shift ``(dx, dy)``."""
    c = np.asarray(pivot, dtype=float)
    shift = c - rot2(dtheta) @ c
    return SE2(shift[0] + dx, shift[1] + dy, dtheta)


# --- SO(3) / SE(3) -----------------------------------------------------------


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix; accepts (3,) or (n, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rotvec_to_matrix(v: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(v, dtype=float)).as_matrix()


def matrix_to_rotvec(r: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(r, dtype=float)).as_rotvec()


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3) for rotation vector(s) ``phi``.

    d rotvec(R Exp(w)) / dw at w = 0 equals this matrix evaluated at rotvec(R).
    """
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    theta = np.linalg.norm(phi, axis=1)
    k = skew(phi)
    k2 = k @ k
    small = theta < 1e-5
    th = np.where(small, 1.0, theta)
    coef = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / th**2 - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th)),
    )
    return np.eye(3) + 0.5 * k + coef[:, None, None] * k2


@dataclass(frozen=True, eq=False)
class SE3:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3":
        return cls()

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "SE3":
        return cls(rotvec_to_matrix(rotvec), translation)

    @classmethod
    def from_quat(cls, quat_xyzw, translation=(0.0, 0.0, 0.0)) -> "SE3":
        return cls(Rotation.from_quat(quat_xyzw).as_matrix(), translation)

    @classmethod
    def from_planar(cls, x: float, y: float, yaw: float, z: float = 0.0) -> "SE3":
        r = np.eye(3)
        r[:2, :2] = rot2(yaw)
        return cls(r, (x, y, z))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "SE3":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def quat(self) -> np.ndarray:
        """Unit quaternion (x, y, z, w) with w >= 0."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def compose(self, other: "SE3") -> "SE3":
        return SE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "SE3":
        rt = self.rotation.T
        return SE3(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    @property
    def yaw(self) -> float:
        """Heading of the body x-axis projected onto the world XY plane."""
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def planar(self) -> SE2:
        return SE2(self.translation[0], self.translation[1], self.yaw)

    def premultiply_planar(self, t: SE2) -> "SE3":
        """Apply a planar world transform to this pose (rotation about world z)."""
        return SE3.from_planar(t.x, t.y, t.theta).compose(self)


def se3_minimal(t: SE3) -> np.ndarray:
    """Minimal 6-vector: translation followed by the rotation vector."""
    return np.concatenate([t.translation, matrix_to_rotvec(t.rotation)])


def se3_from_minimal(v) -> SE3:
    v = np.asarray(v, dtype=float)
    return SE3(rotvec_to_matrix(v[3:6]), v[:3])


# --- polylines ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SegmentChain:
    """Ordered 2D polyline carrying a road-marking class."""

    vertices: np.ndarray
    marking: MarkingClass

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 2:
            raise ValueError("segment chain needs at least two 2D vertices")
        steps = np.linalg.norm(np.diff(v, axis=0), axis=1)
        if np.any(steps <= 1e-9):
            raise ValueError("segment chain has repeated consecutive vertices")
        marking = MarkingClass(self.marking)
        if marking.is_pole:
            raise ValueError("segment chain cannot carry the pole class")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "marking", marking)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.vertices, axis=0), axis=1).sum())

    def samples(self, step: float = HAUSDORFF_STEP) -> np.ndarray:
        return sample_chain(self.vertices, step)

    def reversed(self) -> "SegmentChain":
        return SegmentChain(self.vertices[::-1], self.marking)

    def transformed(self, t: SE2) -> "SegmentChain":
        return SegmentChain(t.apply(self.vertices), self.marking)


Geometry2 = Union[np.ndarray, SegmentChain]


def sample_chain(vertices: np.ndarray, step: float = HAUSDORFF_STEP) -> np.ndarray:
    """Points at uniform arc-length spacing <= ``step``, both endpoints included."""
    v = np.asarray(vertices, dtype=float)
    seg = np.linalg.norm(np.diff(v, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(1, math.ceil(s[-1] / step - 1e-12))
    q = np.linspace(0.0, s[-1], n + 1)
    return np.column_stack([np.interp(q, s, v[:, 0]), np.interp(q, s, v[:, 1])])


def closest_on_chain(points: np.ndarray, vertices: np.ndarray):
    """Closest chain point for each query point.

    Returns ``(closest, tangent, interior)``: the closest points (k, 2), the unit
    direction of the segment they lie on, and whether the projection fell strictly
    inside that segment (False when clamped to a vertex).
    """
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    v = np.asarray(vertices, dtype=float)
    a = v[:-1]
    d = v[1:] - a
    dd = np.einsum("ij,ij->i", d, d)
    rel = p[:, None, :] - a[None, :, :]
    t = np.einsum("ksj,sj->ks", rel, d) / dd
    tc = np.clip(t, 0.0, 1.0)
    diff = rel - tc[..., None] * d[None]
    dist2 = np.einsum("ksj,ksj->ks", diff, diff)
    best = np.argmin(dist2, axis=1)
    rows = np.arange(len(p))
    tb = tc[rows, best]
    closest = a[best] + tb[:, None] * d[best]
    tangent = d[best] / np.sqrt(dd[best])[:, None]
    interior = (t[rows, best] > 0.0) & (t[rows, best] < 1.0)
    return closest, tangent, interior


def point_to_chain_distance(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    closest, _, _ = closest_on_chain(p, vertices)
    return np.linalg.norm(p - closest, axis=1)


def _vertices(chain) -> np.ndarray:
    return chain.vertices if isinstance(chain, SegmentChain) else np.asarray(chain, dtype=float)


def modified_hausdorff(a, b, step: float = HAUSDORFF_STEP) -> float:
    """Symmetric mean point-to-chain distance between two polylines.

    Each chain is sampled at uniform arc-length spacing; the result is the larger
    of the two directed mean distances.
    """
    va, vb = _vertices(a), _vertices(b)
    ab = point_to_chain_distance(sample_chain(va, step), vb).mean()
    ba = point_to_chain_distance(sample_chain(vb, step), va).mean()
    return float(max(ab, ba))


def pole_distance(a, b) -> float:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(math.hypot(d[0], d[1]))


def check_compatible(feature: Geometry2, landmark: Geometry2) -> None:
    f_chain = isinstance(feature, SegmentChain)
    l_chain = isinstance(landmark, SegmentChain)
    if f_chain != l_chain:
        raise IncompatibleMatch("pole geometry cannot be matched against a segment chain")
    if f_chain and feature.marking is not landmark.marking:
        raise IncompatibleMatch(
            f"marking classes differ: {feature.marking.value} vs {landmark.marking.value}"
        )


def feature_distance(feature: Geometry2, landmark: Geometry2, w_h: float = 1.0) -> float:
    """Generalized match distance: euclidean for poles, ``w_h`` times d_h for chains.

    Poles are given as 2-vectors, road markings as :class:`SegmentChain`; both in
    the same (world) frame.
    """
    check_compatible(feature, landmark)
    if isinstance(feature, SegmentChain):
        return w_h * modified_hausdorff(feature, landmark)
    return pole_distance(feature, landmark)
