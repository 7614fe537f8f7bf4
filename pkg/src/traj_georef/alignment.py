"""Joint alignment of all trajectories to the matched landmarks.

Every pose is a free SE(3) parameter.  Matched features pull their anchor pose
toward the landmark they were associated with; relative-pose terms between
nearby poses keep the initial local shape.  Pose increments are applied on the
right, ``P <- P * (exp(w), rho)``, so the Jacobians are taken with respect to
the body-frame increment ``(rho, w)``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import NoMatchesWarning, ValidationError
from .geometry import (
    SE3,
    SegmentChain,
    closest_on_chain,
    modified_hausdorff,
    pole_distance,
    sample_chain,
    skew,
    so3_right_jacobian_inv,
)
from .model import Feature, Landmark, Match, Trajectory, feature_world_position
from .solver import LeastSquaresProblem, LMResult, SolverOptions, lm_minimize

log = logging.getLogger(__name__)


def _default_solver() -> SolverOptions:
    return SolverOptions(
        max_iterations=50, gradient_tolerance=1e-10, step_tolerance=1e-10, cost_tolerance=1e-12
    )


@dataclass
class AlignParams:
    w_delta: float = 10.0
    cross_session_radius: float = 5.0
    max_cross_partners: int = 4
    translation_weight: float = 1.0
    rotation_weight: float = 5.0
    w_h: float = 1.0
    solver: SolverOptions = field(default_factory=_default_solver)

    def __post_init__(self):
        if self.w_delta <= 0:
            raise ValueError("w_delta must be positive")


@dataclass
class Topology:
    """Pose pairs ``(i, j)`` (global indices) with their initial difference.

    ``delta[k] = inverse(P_i) @ P_j`` at initialization, so that
    ``delta @ inverse(P_j) @ P_i`` is the identity for undisturbed poses.
    """

    pairs: np.ndarray
    delta_rot: np.ndarray
    delta_trans: np.ndarray
    cross_session: np.ndarray

    def __len__(self) -> int:
        return len(self.pairs)

    def delta(self, k: int) -> SE3:
        return SE3(self.delta_rot[k], self.delta_trans[k])


def _stack(trajs: Sequence[Trajectory]):
    rots = np.array([p.transform.rotation for t in trajs for p in t.poses]).reshape(-1, 3, 3)
    trans = np.array([p.transform.translation for t in trajs for p in t.poses]).reshape(-1, 3)
    return rots, trans


def _pose_keys(trajs: Sequence[Trajectory]) -> dict:
    keys, k = {}, 0
    for t in trajs:
        for p in t.poses:
            keys[(t.session_id, p.index)] = k
            k += 1
    return keys


def build_topology(trajs: Sequence[Trajectory], p: Optional[AlignParams] = None) -> Topology:
    """Consecutive same-session pairs plus nearby cross-session pairs.

    Cross-session candidates within ``cross_session_radius`` are taken nearest
    first while both poses still have fewer than ``max_cross_partners`` partners.
    """
    p = p or AlignParams()
    if not trajs:
        raise ValueError("need at least one trajectory")
    rots, trans = _stack(trajs)
    session = np.concatenate([[k] * len(t) for k, t in enumerate(trajs)])
    pairs = []
    start = 0
    for t in trajs:
        pairs.extend((start + i, start + i + 1) for i in range(len(t) - 1))
        start += len(t)
    n_chain = len(pairs)

    if len(trajs) > 1 and p.cross_session_radius > 0 and p.max_cross_partners > 0:
        tree = cKDTree(trans)
        cand = tree.query_pairs(p.cross_session_radius, output_type="ndarray")
        if len(cand):
            cand = cand[session[cand[:, 0]] != session[cand[:, 1]]]
            cand = np.sort(cand, axis=1)
            dist = np.linalg.norm(trans[cand[:, 0]] - trans[cand[:, 1]], axis=1)
            order = np.lexsort((cand[:, 1], cand[:, 0], dist))
            count = np.zeros(len(trans), dtype=int)
            for i, j in cand[order]:
                if count[i] < p.max_cross_partners and count[j] < p.max_cross_partners:
                    pairs.append((int(i), int(j)))
                    count[i] += 1
                    count[j] += 1

    pairs = np.array(pairs, dtype=int).reshape(-1, 2)
    ri, rj = rots[pairs[:, 0]], rots[pairs[:, 1]]
    ti, tj = trans[pairs[:, 0]], trans[pairs[:, 1]]
    d_rot = np.einsum("eji,ejk->eik", ri, rj)
    d_trans = np.einsum("eji,ej->ei", ri, tj - ti)
    cross = np.zeros(len(pairs), dtype=bool)
    cross[n_chain:] = True
    return Topology(pairs, d_rot, d_trans, cross)


# --- residual blocks ---------------------------------------------------------


def relative_residual(p_i: SE3, p_j: SE3, delta_ij: SE3, p: AlignParams) -> np.ndarray:
    """Weighted minimal vector of ``delta_ij @ inverse(P_j) @ P_i``."""
    e = delta_ij @ p_j.inverse() @ p_i
    rv = Rotation.from_matrix(e.rotation).as_rotvec()
    return math.sqrt(p.w_delta) * np.concatenate([p.translation_weight * e.translation, p.rotation_weight * rv])


def feature_residual(pose: SE3, f: Feature, lm: Landmark, w_h: float = 1.0) -> np.ndarray:
    """Feature-to-landmark residual under the current anchor pose.

    Poles give the 2D difference.  Chains give, for each arc-length sample of the
    feature, its offset to the nearest landmark-chain point, scaled by
    ``w_h / sqrt(k)``; the squared norm is ``w_h^2`` times the mean squared
    one-sided distance.
    """
    g = feature_world_position(f, pose)
    if isinstance(g, SegmentChain):
        pts = sample_chain(f.geometry.vertices)
        world = pts @ pose.rotation[:2, :2].T + pose.translation[:2]
        cl, _, _ = closest_on_chain(world, lm.geometry.vertices)
        return (w_h / math.sqrt(len(pts))) * (world - cl).ravel()
    return g - lm.geometry


class _FeatureBlocks:
    """Vectorized feature residuals for a list of matches."""

    def __init__(self, matches, features, landmarks, pose_keys, w_h):
        self.poles_pose, self.poles_local, self.poles_target = [], [], []
        seg_pose, seg_local, seg_scale, seg_owner = [], [], [], []
        seg_chains = []
        row = 0
        self.match_rows = []
        for m in matches:
            f = features[m.feature_id]
            lm = landmarks[m.landmark_id]
            pose = pose_keys[f.anchor]
            if f.is_pole:
                self.poles_pose.append(pose)
                self.poles_local.append(f.geometry)
                self.poles_target.append(lm.geometry)
                self.match_rows.append((row, 2))
                row += 2
            else:
                pts = sample_chain(f.geometry.vertices)
                seg_pose.extend([pose] * len(pts))
                seg_local.append(pts)
                seg_scale.extend([w_h / math.sqrt(len(pts))] * len(pts))
                seg_owner.extend([len(seg_chains)] * len(pts))
                seg_chains.append(lm.geometry.vertices)
                self.match_rows.append((row, 2 * len(pts)))
                row += 2 * len(pts)
        self.m = row
        # residual layout follows match order; build row index maps per kind
        self.pole_idx = np.array([r for (r, n), m in zip(self.match_rows, matches) if features[m.feature_id].is_pole], dtype=int)
        seg_starts = [(r, n) for (r, n), m in zip(self.match_rows, matches) if not features[m.feature_id].is_pole]
        self.seg_rows = (
            np.concatenate([np.arange(r, r + n, 2) for r, n in seg_starts]) if seg_starts else np.zeros(0, int)
        )
        self.poles_pose = np.asarray(self.poles_pose, dtype=int)
        self.poles_local = np.asarray(self.poles_local, dtype=float).reshape(-1, 2)
        self.poles_target = np.asarray(self.poles_target, dtype=float).reshape(-1, 2)
        self.seg_pose = np.asarray(seg_pose, dtype=int)
        self.seg_local = np.vstack(seg_local) if seg_local else np.zeros((0, 2))
        self.seg_scale = np.asarray(seg_scale, dtype=float)
        self.seg_owner = np.asarray(seg_owner, dtype=int)
        if seg_chains:
            smax = max(len(v) - 1 for v in seg_chains)
            a = np.empty((len(seg_chains), smax, 2))
            b = np.empty_like(a)
            for i, v in enumerate(seg_chains):
                n = len(v) - 1
                a[i, :n], b[i, :n] = v[:-1], v[1:]
                a[i, n:], b[i, n:] = v[-2], v[-1]
            self.chain_a, self.chain_b = a, b

    def _closest(self, q):
        a = self.chain_a[self.seg_owner]
        d = self.chain_b[self.seg_owner] - a
        dd = np.einsum("ksj,ksj->ks", d, d)
        rel = q[:, None, :] - a
        t = np.einsum("ksj,ksj->ks", rel, d) / dd
        tc = np.clip(t, 0.0, 1.0)
        diff = rel - tc[..., None] * d
        best = np.argmin(np.einsum("ksj,ksj->ks", diff, diff), axis=1)
        rows = np.arange(len(q))
        offset = diff[rows, best]
        tan = d[rows, best] / np.sqrt(dd[rows, best])[:, None]
        interior = (t[rows, best] > 0.0) & (t[rows, best] < 1.0)
        return offset, tan, interior

    def residual(self, rots, trans):
        r = np.empty(self.m)
        if len(self.poles_pose):
            rp = rots[self.poles_pose]
            q = np.einsum("kij,kj->ki", rp[:, :2, :2], self.poles_local) + trans[self.poles_pose, :2]
            e = q - self.poles_target
            r[self.pole_idx] = e[:, 0]
            r[self.pole_idx + 1] = e[:, 1]
        if len(self.seg_pose):
            rs = rots[self.seg_pose]
            q = np.einsum("kij,kj->ki", rs[:, :2, :2], self.seg_local) + trans[self.seg_pose, :2]
            off, _, _ = self._closest(q)
            e = off * self.seg_scale[:, None]
            r[self.seg_rows] = e[:, 0]
            r[self.seg_rows + 1] = e[:, 1]
        return r

    def jacobian_entries(self, rots, trans):
        rows, cols, vals = [], [], []

        def block(row0, pose, local, proj, scale):
            r2 = rots[pose][:, :2, :]
            p3 = np.column_stack([local, np.zeros(len(local))])
            d_rho = r2
            d_w = -np.einsum("kij,kjl->kil", r2, skew(p3))
            jb = np.concatenate([d_rho, d_w], axis=2)
            if proj is not None:
                jb = np.einsum("kij,kjl->kil", proj, jb)
            jb = jb * scale[:, None, None]
            rr = row0[:, None, None] + np.arange(2)[None, :, None]
            cc = 6 * pose[:, None, None] + np.arange(6)[None, None, :]
            rows.append(np.broadcast_to(rr, jb.shape).ravel())
            cols.append(np.broadcast_to(cc, jb.shape).ravel())
            vals.append(jb.ravel())

        if len(self.poles_pose):
            block(self.pole_idx, self.poles_pose, self.poles_local, None, np.ones(len(self.poles_pose)))
        if len(self.seg_pose):
            rs = rots[self.seg_pose]
            q = np.einsum("kij,kj->ki", rs[:, :2, :2], self.seg_local) + trans[self.seg_pose, :2]
            _, tan, interior = self._closest(q)
            proj = np.where(
                interior[:, None, None], np.eye(2)[None] - tan[:, :, None] * tan[:, None, :], np.eye(2)[None]
            )
            block(self.seg_rows, self.seg_pose, self.seg_local, proj, self.seg_scale)
        if not rows:
            return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


class AlignmentProblem:
    """Stacked feature and relative-pose residuals over all poses."""

    def __init__(self, trajs, matches, features, landmarks, p: AlignParams, topology: Optional[Topology] = None):
        self.trajs = list(trajs)
        self.p = p
        self.topology = topology if topology is not None else build_topology(self.trajs, p)
        self.keys = _pose_keys(self.trajs)
        self.n_poses = len(self.keys)
        fmap = features if isinstance(features, dict) else {f.id: f for f in features}
        lmap = landmarks if isinstance(landmarks, dict) else {lm.id: lm for lm in landmarks}
        self.matches = list(matches)
        for m in self.matches:
            if m.feature_id not in fmap or m.landmark_id not in lmap:
                raise ValidationError(f"match {m.feature_id}->{m.landmark_id} names an unknown feature or landmark")
            if fmap[m.feature_id].anchor not in self.keys:
                raise ValidationError(f"feature {m.feature_id} is anchored to a pose not being aligned")
        self.fblocks = _FeatureBlocks(self.matches, fmap, lmap, self.keys, p.w_h)
        self.m_feat = self.fblocks.m
        self.m = self.m_feat + 6 * len(self.topology)
        w = math.sqrt(p.w_delta)
        self.rel_scale = w * np.array([p.translation_weight] * 3 + [p.rotation_weight] * 3)
        rots, trans = _stack(self.trajs)
        self.x0 = pack(rots, trans)

    def residual(self, x: np.ndarray) -> np.ndarray:
        rots, trans = unpack(x)
        return np.concatenate([self.fblocks.residual(rots, trans), self._relative(rots, trans)[0]])

    def _relative(self, rots, trans):
        top = self.topology
        i, j = top.pairs[:, 0], top.pairs[:, 1]
        rj_t = np.transpose(rots[j], (0, 2, 1))
        r_m = rj_t @ rots[i]
        t_m = np.einsum("eij,ej->ei", rj_t, trans[i] - trans[j])
        r_e = top.delta_rot @ r_m
        t_e = np.einsum("eij,ej->ei", top.delta_rot, t_m) + top.delta_trans
        phi = Rotation.from_matrix(r_e).as_rotvec() if len(r_e) else np.zeros((0, 3))
        r = (np.concatenate([t_e, phi], axis=1) * self.rel_scale).ravel()
        return r, (r_m, t_m, r_e, phi)

    def jacobian(self, x: np.ndarray):
        rots, trans = unpack(x)
        fr, fc, fv = self.fblocks.jacobian_entries(rots, trans)
        _, (r_m, t_m, r_e, phi) = self._relative(rots, trans)
        top = self.topology
        ne = len(top)
        jr_inv = so3_right_jacobian_inv(phi) if ne else np.zeros((0, 3, 3))
        ji = np.zeros((ne, 6, 6))
        jj = np.zeros((ne, 6, 6))
        ji[:, :3, :3] = r_e
        ji[:, 3:, 3:] = jr_inv
        jj[:, :3, :3] = -top.delta_rot
        jj[:, :3, 3:] = top.delta_rot @ skew(t_m)
        jj[:, 3:, 3:] = -jr_inv @ np.transpose(r_m, (0, 2, 1))
        ji *= self.rel_scale[None, :, None]
        jj *= self.rel_scale[None, :, None]
        base = self.m_feat + 6 * np.arange(ne)
        rr = base[:, None, None] + np.arange(6)[None, :, None]
        rows = [fr]
        cols = [fc]
        vals = [fv]
        for blk, idx in ((ji, top.pairs[:, 0]), (jj, top.pairs[:, 1])):
            cc = 6 * idx[:, None, None] + np.arange(6)[None, None, :]
            rows.append(np.broadcast_to(rr, blk.shape).ravel())
            cols.append(np.broadcast_to(cc, blk.shape).ravel())
            vals.append(blk.ravel())
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.m, 6 * self.n_poses),
        )

    def retract(self, x: np.ndarray, dx: np.ndarray) -> np.ndarray:
        rots, trans = unpack(x)
        d = dx.reshape(-1, 6)
        new_trans = trans + np.einsum("kij,kj->ki", rots, d[:, :3])
        new_rots = rots @ Rotation.from_rotvec(d[:, 3:]).as_matrix()
        return pack(new_rots, new_trans)

    def least_squares(self) -> LeastSquaresProblem:
        return LeastSquaresProblem(self.residual, 6 * self.n_poses, self.jacobian, self.retract, self.m)

    def split_cost(self, x: np.ndarray) -> tuple[float, float]:
        r = self.residual(x)
        return 0.5 * float(r[: self.m_feat] @ r[: self.m_feat]), 0.5 * float(r[self.m_feat:] @ r[self.m_feat:])


def pack(rots: np.ndarray, trans: np.ndarray) -> np.ndarray:
    rv = Rotation.from_matrix(rots).as_rotvec() if len(rots) else np.zeros((0, 3))
    return np.concatenate([trans, rv], axis=1).ravel()


def unpack(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(x, dtype=float).reshape(-1, 6)
    return Rotation.from_rotvec(v[:, 3:]).as_matrix(), v[:, :3].copy()


@dataclass
class MatchResidual:
    feature_id: str
    landmark_id: str
    residual_norm: float
    distance: float


@dataclass
class AlignReport:
    initial_feature_cost: float
    initial_regularizer_cost: float
    final_feature_cost: float
    final_regularizer_cost: float
    iterations: int
    termination: str
    n_matches: int
    n_pairs: int
    cost_history: list = field(default_factory=list)
    match_residuals: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def initial_cost(self) -> float:
        return self.initial_feature_cost + self.initial_regularizer_cost

    @property
    def final_cost(self) -> float:
        return self.final_feature_cost + self.final_regularizer_cost


def _match_residuals(prob: AlignmentProblem, x, features, landmarks) -> list[MatchResidual]:
    r = prob.residual(x)
    rots, trans = unpack(x)
    out = []
    for m, (row, n) in zip(prob.matches, prob.fblocks.match_rows):
        f, lm = features[m.feature_id], landmarks[m.landmark_id]
        k = prob.keys[f.anchor]
        pose = SE3(rots[k], trans[k])
        g = feature_world_position(f, pose)
        if f.is_pole:
            dist = pole_distance(g, lm.geometry)
        else:
            dist = prob.p.w_h * modified_hausdorff(g, lm.geometry)
        out.append(MatchResidual(m.feature_id, m.landmark_id, float(np.linalg.norm(r[row: row + n])), float(dist)))
    return out


def align(
    trajs: Sequence[Trajectory],
    matches: Sequence[Match],
    landmarks: Sequence[Landmark],
    features: Sequence[Feature],
    p: Optional[AlignParams] = None,
) -> tuple[list[Trajectory], AlignReport]:
    """Adjust all poses so matched features land on their landmarks.

    Starts from the given trajectories.  Without matches the relative-pose
    terms alone are already minimal at the start, so the input is returned
    unchanged (with a :class:`NoMatchesWarning`).
    """
    p = p or AlignParams()
    fmap = {f.id: f for f in features}
    lmap = {lm.id: lm for lm in landmarks}
    prob = AlignmentProblem(trajs, matches, fmap, lmap, p)
    fc0, rc0 = prob.split_cost(prob.x0)
    if not matches:
        msg = "no feature matches; alignment returns the initialization"
        warnings.warn(msg, NoMatchesWarning, stacklevel=2)
        log.warning(msg)
        report = AlignReport(fc0, rc0, fc0, rc0, 0, "no_matches", 0, len(prob.topology), [fc0 + rc0], [], [msg])
        return [t.with_transforms([q.transform for q in t.poses]) for t in trajs], report

    res: LMResult = lm_minimize(prob.least_squares(), prob.x0, p.solver)
    fc1, rc1 = prob.split_cost(res.x)
    rots, trans = unpack(res.x)
    out, k = [], 0
    for t in trajs:
        n = len(t)
        out.append(t.with_transforms(SE3(rots[k + i], trans[k + i]) for i in range(n)))
        k += n
    report = AlignReport(
        fc0, rc0, fc1, rc1, res.iterations, res.reason, len(prob.matches), len(prob.topology),
        list(res.history), _match_residuals(prob, res.x, fmap, lmap),
    )
    log.info("align: %d matches, %d pairs, cost %.4g -> %.4g in %d iterations (%s)",
             len(prob.matches), len(prob.topology), report.initial_cost, report.final_cost,
             res.iterations, res.reason)
    return out, report
