"""Sliding-window RANSAC association of features to landmarks.

Windows are laid along each trajectory.  Inside a window, two features are
paired at random with two nearby compatible landmarks, a rigid planar
correction is fitted to that pair, and every feature is then re-associated
with its nearest compatible landmark under the correction.  The hypothesis
with the smallest window cost wins; a gate against the previous window's
correction rejects jumps caused by repetitive layouts.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, replace
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput, InsufficientCandidates, NumericalFailure
from .geometry import SE2, SegmentChain, closest_on_chain, rot2, sample_chain
from .model import Feature, Landmark, Match, MatchParams, Trajectory, feature_world_position
from .solver import LeastSquaresProblem, SolverOptions, lm_minimize

log = logging.getLogger(__name__)

FIT_OPTIONS = SolverOptions(
    max_iterations=60, gradient_tolerance=1e-14, step_tolerance=1e-14, cost_tolerance=1e-16
)

CONVERGED = "converged"
REJECTED = "rejected"
INSUFFICIENT = "insufficient_features"


@dataclass(frozen=True, eq=False)
class Window:
    id: int
    session_id: str
    center: np.ndarray
    heading: float
    half_extent: float
    feature_ids: tuple[str, ...]
    landmark_ids: tuple[str, ...]

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Chebyshev box test in the window frame (x along the trajectory)."""
        local = (np.atleast_2d(points) - self.center) @ rot2(self.heading)
        return np.max(np.abs(local), axis=1) <= self.half_extent


@dataclass(frozen=True)
class Hypothesis:
    pairs: tuple[tuple[str, str], tuple[str, str]]

    def __post_init__(self):
        (f1, l1), (f2, l2) = self.pairs
        if f1 == f2 or l1 == l2:
            raise ValueError("hypothesis needs two distinct features and two distinct landmarks")


@dataclass
class WindowResult:
    """Best gated hypothesis of one window.

    ``transform`` and ``inliers`` describe that hypothesis even when the window is
    rejected; only converged windows contribute matches.
    """

    window_id: int
    transform: Optional[SE2]
    inliers: list[Match]
    e_f: float
    status: str
    hypotheses: int = 0
    e_limit: float = 0.0


def reference_point(geom) -> np.ndarray:
    if isinstance(geom, SegmentChain):
        return geom.vertices.mean(axis=0)
    return np.asarray(geom, dtype=float)


def initial_world_geometry(trajs: Sequence[Trajectory], features: Sequence[Feature]) -> dict:
    """World geometry of every feature under the (initial) trajectory poses."""
    poses = {}
    for t in trajs:
        for p in t.poses:
            poses[(t.session_id, p.index)] = p.transform
    out = {}
    for f in features:
        pose = poses.get(f.anchor)
        if pose is None:
            raise KeyError(f"feature {f.id} anchored to unknown pose {f.anchor}")
        out[f.id] = feature_world_position(f, pose)
    return out


class LandmarkIndex:
    """Radius lookup over all landmark vertices."""

    def __init__(self, landmarks: Sequence[Landmark]):
        self.landmarks = list(landmarks)
        pts, owner = [], []
        for k, lm in enumerate(self.landmarks):
            g = lm.geometry
            v = g.vertices if isinstance(g, SegmentChain) else np.atleast_2d(g)
            pts.append(v)
            owner.extend([k] * len(v))
        self.owner = np.asarray(owner, dtype=int)
        self.tree = cKDTree(np.vstack(pts)) if pts else None

    def within(self, center, radius: float) -> tuple[str, ...]:
        if self.tree is None:
            return ()
        hits = self.tree.query_ball_point(np.asarray(center, dtype=float), radius)
        ks = np.unique(self.owner[hits]) if hits else []
        return tuple(self.landmarks[k].id for k in ks)


def _window_frames(traj: Trajectory, p: MatchParams):
    xy = traj.positions()[:, :2]
    s = traj.arc_length()
    total = s[-1]
    if total < p.window_length:
        stations = [total / 2.0]
    else:
        n = max(1, math.ceil(total / p.stride - 1e-9))
        stations = [total / 2.0 + (k - (n - 1) / 2.0) * p.stride for k in range(n)]
    for st in stations:
        k = int(np.clip(np.searchsorted(s, st, side="right") - 1, 0, len(s) - 2))
        seg = xy[k + 1] - xy[k]
        ln = s[k + 1] - s[k]
        frac = (st - s[k]) / ln if ln > 0 else 0.0
        yield xy[k] + frac * seg, math.atan2(seg[1], seg[0])


def build_windows(
    trajs: Sequence[Trajectory],
    features: Sequence[Feature],
    landmarks: Sequence[Landmark],
    p: MatchParams,
    world: Optional[dict] = None,
) -> list[Window]:
    """Overlapping windows along each trajectory with their features and candidate landmarks."""
    if not trajs:
        raise EmptyInput("no trajectories to window")
    world = world if world is not None else initial_world_geometry(trajs, features)
    index = LandmarkIndex(landmarks)
    half = p.window_length / 2.0
    windows = []
    for traj in trajs:
        own = [f for f in features if f.session_id == traj.session_id]
        ref = np.array([reference_point(world[f.id]) for f in own]).reshape(-1, 2)
        for center, heading in _window_frames(traj, p):
            w = Window(len(windows), traj.session_id, center, heading, half, (), ())
            inside = w.contains(ref) if len(own) else np.zeros(0, bool)
            ids = tuple(f.id for f, ok in zip(own, inside) if ok)
            windows.append(replace(w, feature_ids=ids, landmark_ids=index.within(center, p.search_radius)))
    return windows


def unassigned_features(windows: Sequence[Window], features: Sequence[Feature]) -> list[str]:
    covered = set(itertools.chain.from_iterable(w.feature_ids for w in windows))
    return [f.id for f in features if f.id not in covered]


# --- per-window working set --------------------------------------------------


def _pad_chains(chains: list[np.ndarray], step: float):
    """Padded segment endpoints and arc-length samples for a group of chains."""
    n = len(chains)
    samples = [sample_chain(v, step) for v in chains]
    smax = max(len(v) - 1 for v in chains)
    kmax = max(len(s) for s in samples)
    a = np.empty((n, smax, 2))
    b = np.empty((n, smax, 2))
    s_pad = np.empty((n, kmax, 2))
    weight = np.zeros((n, kmax))
    centroid = np.empty((n, 2))
    radius = np.empty(n)
    for i, (v, s) in enumerate(zip(chains, samples)):
        m = len(v) - 1
        a[i, :m], b[i, :m] = v[:-1], v[1:]
        a[i, m:], b[i, m:] = v[-2], v[-1]
        s_pad[i, : len(s)] = s
        s_pad[i, len(s):] = s[-1]
        weight[i, : len(s)] = 1.0 / len(s)
        centroid[i] = v.mean(axis=0)
        radius[i] = np.max(np.linalg.norm(v - centroid[i], axis=1))
    return a, b, s_pad, weight, centroid, radius


def _directed_mean(samples, weight, a, b) -> np.ndarray:
    """Weighted mean over samples of the distance to the nearest padded segment."""
    d = b - a
    dd = np.einsum("psj,psj->ps", d, d)
    rel = samples[:, :, None, :] - a[:, None, :, :]
    t = np.clip(np.einsum("pksj,psj->pks", rel, d) / dd[:, None, :], 0.0, 1.0)
    diff = rel - t[..., None] * d[:, None, :, :]
    dist = np.sqrt(np.min(np.einsum("pksj,pksj->pks", diff, diff), axis=2))
    return np.einsum("pk,pk->p", dist, weight)


def _apply(t: SE2, pts: np.ndarray) -> np.ndarray:
    return t.apply(pts) if len(pts) else pts


class WindowProblem:
    """Geometry of one window prepared for repeated hypothesis evaluation."""

    def __init__(self, window: Window, world: dict, landmarks: dict, features: dict, p: MatchParams):
        self.window = window
        self.params = p
        self.feature_ids = list(window.feature_ids)
        self.landmark_ids = list(window.landmark_ids)
        self.f_index = {fid: k for k, fid in enumerate(self.feature_ids)}
        self.l_index = {lid: k for k, lid in enumerate(self.landmark_ids)}
        self.f_geom = [world[fid] for fid in self.feature_ids]
        self.l_geom = [landmarks[lid].geometry for lid in self.landmark_ids]
        self.f_class = [features[fid].marking for fid in self.feature_ids]
        self.l_class = [landmarks[lid].marking for lid in self.landmark_ids]
        self.f_ref = np.array([reference_point(g) for g in self.f_geom]).reshape(-1, 2)
        self.l_ref = np.array([reference_point(g) for g in self.l_geom]).reshape(-1, 2)
        self.f_samples = [
            g.samples() if isinstance(g, SegmentChain) else None for g in self.f_geom
        ]

        fp = [k for k, c in enumerate(self.f_class) if c.is_pole]
        lp = [k for k, c in enumerate(self.l_class) if c.is_pole]
        self.pole_f = np.asarray(fp, dtype=int)
        self.pole_l = np.asarray(lp, dtype=int)
        self.pole_fxy = np.array([self.f_geom[k] for k in fp]).reshape(-1, 2)
        self.pole_lxy = np.array([self.l_geom[k] for k in lp]).reshape(-1, 2)

        self.groups = []
        classes = sorted({c for c in self.f_class if not c.is_pole}, key=lambda c: c.value)
        for c in classes:
            fk = [k for k, fc in enumerate(self.f_class) if fc is c]
            lk = [k for k, lc in enumerate(self.l_class) if lc is c]
            if not lk:
                continue
            fa, fb, fs, fw, fc_, fr = _pad_chains([self.f_geom[k].vertices for k in fk], 0.25)
            la, lb, ls, lw, lc_, lr = _pad_chains([self.l_geom[k].vertices for k in lk], 0.25)
            self.groups.append(
                dict(f=np.asarray(fk), l=np.asarray(lk), fa=fa, fb=fb, fs=fs, fw=fw, fc=fc_, fr=fr,
                     la=la, lb=lb, ls=ls, lw=lw, lc=lc_, lr=lr)
            )

    @property
    def n_features(self) -> int:
        return len(self.feature_ids)

    def compatible(self, fi: int, li: int) -> bool:
        fc, lc = self.f_class[fi], self.l_class[li]
        return fc is lc

    # candidates ---------------------------------------------------------

    def candidates(self, prior: Optional[SE2] = None, radius: Optional[float] = None) -> list[list[int]]:
        """Compatible landmarks near each feature's predicted position, per feature."""
        radius = self.params.candidate_radius if radius is None else radius
        pred = self.f_ref if prior is None else _apply(prior, self.f_ref)
        out = []
        for fi in range(self.n_features):
            if len(self.l_ref) == 0:
                out.append([])
                continue
            dist = np.linalg.norm(self.l_ref - pred[fi], axis=1)
            out.append([li for li in np.flatnonzero(dist <= radius) if self.compatible(fi, li)])
        return out

    # evaluation ---------------------------------------------------------

    def nearest(self, t: SE2) -> tuple[np.ndarray, np.ndarray]:
        """Nearest compatible landmark (index, d_f) for every feature under ``t``.

        Features without any landmark closer than the inlier threshold get index -1
        and an infinite distance.
        """
        p = self.params
        tau = p.inlier_threshold
        best_l = np.full(self.n_features, -1, dtype=int)
        best_d = np.full(self.n_features, np.inf)
        if len(self.pole_f) and len(self.pole_l):
            q = _apply(t, self.pole_fxy)
            d = np.linalg.norm(q[:, None, :] - self.pole_lxy[None, :, :], axis=2)
            k = np.argmin(d, axis=1)
            dk = d[np.arange(len(k)), k]
            ok = dk < tau
            best_l[self.pole_f[ok]] = self.pole_l[k[ok]]
            best_d[self.pole_f[ok]] = dk[ok]
        bound = tau / p.w_h
        for g in self.groups:
            fc = _apply(t, g["fc"])
            gap = np.linalg.norm(fc[:, None, :] - g["lc"][None, :, :], axis=2) - g["fr"][:, None] - g["lr"][None, :]
            pi, pj = np.nonzero(gap < bound)
            if len(pi) == 0:
                continue
            fs = t.apply(g["fs"][pi])
            fa = t.apply(g["fa"][pi])
            fb = t.apply(g["fb"][pi])
            fwd = _directed_mean(fs, g["fw"][pi], g["la"][pj], g["lb"][pj])
            bwd = _directed_mean(g["ls"][pj], g["lw"][pj], fa, fb)
            df = p.w_h * np.maximum(fwd, bwd)
            dmat = np.full((len(g["f"]), len(g["l"])), np.inf)
            dmat[pi, pj] = df
            k = np.argmin(dmat, axis=1)
            dk = dmat[np.arange(len(k)), k]
            ok = dk < tau
            best_l[g["f"][ok]] = g["l"][k[ok]]
            best_d[g["f"][ok]] = dk[ok]
        return best_l, best_d

    def score(self, t: SE2) -> tuple[list[Match], float]:
        best_l, best_d = self.nearest(t)
        ok = best_l >= 0
        e_f = float(best_d[ok].sum()) + self.params.inlier_threshold * int((~ok).sum())
        inliers = [
            Match(self.feature_ids[fi], self.landmark_ids[best_l[fi]], float(best_d[fi]))
            for fi in np.flatnonzero(ok)
        ]
        return inliers, e_f


# --- RANSAC pieces -----------------------------------------------------------


def hypothesis_count(cands: list[list[int]]) -> int:
    total = 0
    sets = [set(c) for c in cands]
    for i, j in itertools.combinations(range(len(cands)), 2):
        total += len(cands[i]) * len(cands[j]) - len(sets[i] & sets[j])
    return total


def enumerate_hypotheses(cands: list[list[int]]) -> Iterator[tuple[int, int, int, int]]:
    for i, j in itertools.combinations(range(len(cands)), 2):
        for li in cands[i]:
            for lj in cands[j]:
                if li != lj:
                    yield (i, li, j, lj)


def _draw(cands: list[list[int]], rng: np.random.Generator) -> tuple[int, int, int, int]:
    usable = [k for k, c in enumerate(cands) if c]
    if len(usable) < 2:
        raise InsufficientCandidates("fewer than two features have compatible landmarks")
    for _ in range(1000):
        i, j = sorted(rng.choice(len(usable), size=2, replace=False))
        fi, fj = usable[i], usable[j]
        li = cands[fi][rng.integers(len(cands[fi]))]
        lj = cands[fj][rng.integers(len(cands[fj]))]
        if li != lj:
            return (fi, li, fj, lj)
    raise InsufficientCandidates("could not draw two distinct landmarks")


def sample_hypothesis(w: WindowProblem, rng: np.random.Generator, prior: Optional[SE2] = None) -> Hypothesis:
    """Two random features, each paired with a random compatible nearby landmark."""
    if w.n_features < 2:
        raise InsufficientCandidates(f"window {w.window.id} has {w.n_features} feature(s)")
    cands = w.candidates(prior)
    if hypothesis_count(cands) == 0:
        raise InsufficientCandidates(f"window {w.window.id} has no valid landmark pairing")
    fi, li, fj, lj = _draw(cands, rng)
    return Hypothesis(((w.feature_ids[fi], w.landmark_ids[li]), (w.feature_ids[fj], w.landmark_ids[lj])))


def pair_problem(pairs, w_h: float = 1.0, pivot=None) -> tuple[LeastSquaresProblem, np.ndarray]:
    """Least-squares problem behind :func:`fit_pairs` and the pivot it rotates about.

    Parameters are ``(dx, dy, dtheta)``: rotate by ``dtheta`` about the pivot,
    then shift.  Poles contribute their 2D offset; chains contribute the offsets
    of their arc-length samples to the landmark chain, scaled by ``w_h / sqrt(k)``.
    """
    moving, targets, scales = [], [], []
    for f, l in pairs:
        if isinstance(f, SegmentChain):
            pts = f.samples()
            moving.append(pts)
            targets.append(l.vertices)
            scales.append(w_h / math.sqrt(len(pts)))
        else:
            moving.append(np.atleast_2d(np.asarray(f, dtype=float)))
            targets.append(np.atleast_2d(np.asarray(l, dtype=float)))
            scales.append(None)
    allpts = np.vstack(moving)
    c = allpts.mean(axis=0) if pivot is None else np.asarray(pivot, dtype=float)
    # work relative to the pivot so large world coordinates do not eat precision
    rel = [m - c for m in moving]
    targets = [t - c for t in targets]

    def moved(x):
        r = rot2(x[2])
        return [q @ r.T + x[:2] for q in rel]

    def residual(x):
        out = []
        for q, tgt, scale in zip(moved(x), targets, scales):
            if scale is None:
                out.append((q - tgt).ravel())
            else:
                cl, _, _ = closest_on_chain(q, tgt)
                out.append(scale * (q - cl).ravel())
        return np.concatenate(out)

    def jacobian(x):
        s, co = math.sin(x[2]), math.cos(x[2])
        blocks = []
        for q, r0, tgt, scale in zip(moved(x), rel, targets, scales):
            dq = np.zeros((len(q), 2, 3))
            dq[:, 0, 0] = 1.0
            dq[:, 1, 1] = 1.0
            dq[:, 0, 2] = -s * r0[:, 0] - co * r0[:, 1]
            dq[:, 1, 2] = co * r0[:, 0] - s * r0[:, 1]
            if scale is not None:
                _, tan, interior = closest_on_chain(q, tgt)
                proj = np.where(
                    interior[:, None, None],
                    np.eye(2)[None] - tan[:, :, None] * tan[:, None, :],
                    np.eye(2)[None],
                )
                dq = scale * np.einsum("kij,kjn->kin", proj, dq)
            blocks.append(dq.reshape(-1, 3))
        return np.vstack(blocks)

    return LeastSquaresProblem(residual, 3, jacobian), c


def fit_pairs(pairs, w_h: float = 1.0, pivot=None) -> tuple[SE2, float]:
    """Rigid planar transform superimposing features onto landmarks.

    ``pairs`` is a sequence of (feature geometry, landmark geometry) in world
    coordinates.  Starting at the identity, LM minimizes the summed squared
    feature distances with the rotation taken about ``pivot`` (default: centroid
    of the feature points).  Returns the world-frame transform and the final cost.
    """
    problem, c = pair_problem(pairs, w_h, pivot)
    res = lm_minimize(problem, np.zeros(3), FIT_OPTIONS)
    x = res.x
    shift = c - rot2(x[2]) @ c + x[:2]
    return SE2(shift[0], shift[1], x[2]), res.cost


def fit_local_transform(w: WindowProblem, h: Hypothesis, prior: Optional[SE2] = None) -> SE2:
    """Fit the window correction to the two associations of ``h``.

    With a ``prior`` the features are first moved by it and the fit starts from
    the identity in that predicted frame; the returned transform includes the prior.
    """
    pairs = []
    for fid, lid in h.pairs:
        g = w.f_geom[w.f_index[fid]]
        if prior is not None:
            g = g.transformed(prior) if isinstance(g, SegmentChain) else prior.apply(g)
        pairs.append((g, w.l_geom[w.l_index[lid]]))
    t, _ = fit_pairs(pairs, w.params.w_h)
    return t if prior is None else t @ prior


def evaluate_transform(w: WindowProblem, t: SE2, p: Optional[MatchParams] = None) -> tuple[list[Match], float]:
    """Inlier matches under ``t`` and the window cost E_f.

    E_f sums the inlier distances and charges the inlier threshold for every
    feature left without an inlier.
    """
    if p is not None and p is not w.params:
        w = _with_params(w, p)
    return w.score(t)


def _with_params(w: WindowProblem, p: MatchParams) -> WindowProblem:
    clone = object.__new__(WindowProblem)
    clone.__dict__.update(w.__dict__)
    clone.params = p
    return clone


def consistency_gate(
    prev: Optional[SE2], delta: SE2, p: MatchParams, pivot=None, scale: float = 1.0
) -> bool:
    """Accept ``delta`` unless it departs from ``prev`` by more than the gate thresholds.

    The translation part of the difference is measured as the displacement of
    ``pivot`` (the window center), which keeps the test independent of where the
    world origin lies.  ``scale`` widens both thresholds when windows were skipped
    since ``prev`` was estimated.
    """
    if prev is None:
        return True
    diff = prev.inverse() @ delta
    if abs(diff.theta) > p.gate_angle * scale:
        return False
    if pivot is None:
        moved = diff.translation
    else:
        c = np.asarray(pivot, dtype=float)
        moved = diff.apply(c) - c
    return bool(np.hypot(moved[0], moved[1]) <= p.gate_translation * scale)


def match_window(
    w: WindowProblem,
    prev: Optional[SE2],
    p: MatchParams,
    rng: np.random.Generator,
    gate_scale: float = 1.0,
) -> WindowResult:
    """RANSAC over two-pair hypotheses inside one window."""
    if p is not w.params:
        w = _with_params(w, p)
    limit = p.limit_for(w.n_features)
    wid = w.window.id
    cands = w.candidates(prev)
    total = hypothesis_count(cands) if w.n_features >= 2 else 0
    if total == 0:
        return WindowResult(wid, None, [], math.inf, INSUFFICIENT, 0, limit)

    if total <= p.max_hypotheses:
        pool = list(enumerate_hypotheses(cands))
        order = rng.permutation(len(pool))
        draws = (pool[k] for k in order)
    else:
        draws = (_draw(cands, rng) for _ in range(p.max_hypotheses))

    best = None
    tried = 0
    seen = set()
    for fi, li, fj, lj in draws:
        tried += 1
        if (fi, li, fj, lj) in seen:
            continue
        seen.add((fi, li, fj, lj))
        h = Hypothesis(((w.feature_ids[fi], w.landmark_ids[li]), (w.feature_ids[fj], w.landmark_ids[lj])))
        try:
            t = fit_local_transform(w, h, prev)
        except NumericalFailure:
            continue
        if not consistency_gate(prev, t, p, w.window.center, gate_scale):
            continue
        inliers, e_f = w.score(t)
        if best is None or e_f < best[1]:
            best = (t, e_f, inliers)
        if e_f < limit:
            break

    if best is None:
        return WindowResult(wid, None, [], math.inf, REJECTED, tried, limit)
    t, e_f, inliers = best
    status = CONVERGED if e_f < limit else REJECTED
    return WindowResult(wid, t, inliers, e_f, status, tried, limit)


def window_rng(p: MatchParams, window_id: int) -> np.random.Generator:
    return np.random.default_rng([p.rng_seed, window_id])


def match_all(
    trajs: Sequence[Trajectory],
    features: Sequence[Feature],
    landmarks: Sequence[Landmark],
    p: MatchParams,
) -> tuple[list[Match], list[WindowResult]]:
    """Match every window of every trajectory and merge the inliers.

    Each window's correction is gated against the last converged window of the
    same trajectory, which also serves as the prediction for candidate lookup.
    A feature matched in several windows keeps the match from the window whose
    center is closest to it.
    """
    if not trajs:
        raise EmptyInput("no trajectories")
    world = initial_world_geometry(trajs, features)
    windows = build_windows(trajs, features, landmarks, p, world)
    by_f = {f.id: f for f in features}
    by_l = {lm.id: lm for lm in landmarks}
    index = LandmarkIndex(landmarks)

    results: list[WindowResult] = []
    prev: Optional[SE2] = None
    prev_pos = 0
    session = None
    for pos, win in enumerate(windows):
        if win.session_id != session:
            session, prev = win.session_id, None
        if prev is not None:
            predicted = prev.apply(win.center)
            win = replace(win, landmark_ids=index.within(predicted, p.search_radius))
        problem = WindowProblem(win, world, by_l, by_f, p)
        scale = float(pos - prev_pos) if prev is not None else 1.0
        res = match_window(problem, prev, p, window_rng(p, win.id), gate_scale=scale)
        results.append(res)
        if res.status == CONVERGED:
            prev, prev_pos = res.transform, pos
        log.debug("window %d (%s): %s, E_f=%.3f, %d inliers, %d hypotheses",
                  win.id, win.session_id, res.status, res.e_f, len(res.inliers), res.hypotheses)

    centers = {w.id: w.center for w in windows}
    chosen: dict[str, tuple[float, int, Match]] = {}
    for res in results:
        if res.status != CONVERGED:
            continue
        for m in res.inliers:
            d = float(np.linalg.norm(reference_point(world[m.feature_id]) - centers[res.window_id]))
            key = (d, res.window_id)
            if m.feature_id not in chosen or key < chosen[m.feature_id][:2]:
                chosen[m.feature_id] = (d, res.window_id, m)
    matches = [chosen[f.id][2] for f in features if f.id in chosen]
    return matches, results
