"""Newline-delimited JSON records for poses, features, landmarks and matches.

One JSON object per line, each carrying ``schema`` (format version) and
``type``.  Rotations are stored as full row-major 3x3 matrices so that a
load/save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import IoError, ParseError, ValidationError
from .geometry import SE3, SegmentChain
from .markings import MarkingClass
from .model import Feature, Landmark, Match, Pose, Trajectory

SCHEMA_VERSION = 1


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def write_records(path, records: Iterable[dict]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                fh.write(_dumps({"schema": SCHEMA_VERSION, **rec}))
                fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_records(path, kind: str) -> Iterator[tuple[str, dict]]:
    """Yield ``(location, record)`` for every non-blank line of type ``kind``."""
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{where}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ParseError(f"{where}: expected a JSON object")
            if rec.get("schema") != SCHEMA_VERSION:
                raise ParseError(f"{where}: unsupported schema version {rec.get('schema')!r}")
            if rec.get("type") != kind:
                raise ParseError(f"{where}: expected a {kind!r} record, got {rec.get('type')!r}")
            yield where, rec


def _field(rec: dict, key: str, where: str):
    try:
        return rec[key]
    except KeyError:
        raise ParseError(f"{where}: missing field {key!r}") from None


def _floats(value, shape, where: str, key: str) -> np.ndarray:
    try:
        a = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ParseError(f"{where}: {key} must be numeric") from None
    if shape is not None and a.shape != shape:
        raise ParseError(f"{where}: {key} has shape {a.shape}, expected {shape}")
    return a


def _geometry(rec: dict, marking: MarkingClass, where: str):
    g = _field(rec, "geometry", where)
    if marking.is_pole:
        return _floats(g, (2,), where, "geometry")
    a = _floats(g, None, where, "geometry")
    if a.ndim != 2 or a.shape[1] != 2:
        raise ParseError(f"{where}: chain geometry must be a list of [x, y] points")
    return a


def _marking(rec: dict, where: str) -> MarkingClass:
    try:
        return MarkingClass.parse(str(_field(rec, "class", where)))
    except ValueError as exc:
        raise ParseError(f"{where}: {exc}") from None


def _geometry_out(g) -> list:
    if isinstance(g, SegmentChain):
        return g.vertices.tolist()
    return np.asarray(g, dtype=float).tolist()


# --- poses / trajectories ---------------------------------------------------


def pose_record(p: Pose) -> dict:
    return {
        "type": "pose",
        "session": p.session_id,
        "index": int(p.index),
        "timestamp": float(p.timestamp),
        "translation": p.transform.translation.tolist(),
        "rotation": p.transform.rotation.reshape(-1).tolist(),
    }


def save_trajectories(path, trajs: Sequence[Trajectory]) -> None:
    write_records(path, (pose_record(p) for t in trajs for p in t.poses))


def load_trajectories(path) -> list[Trajectory]:
    """Poses grouped by session, sessions in order of first appearance."""
    groups: "OrderedDict[str, list]" = OrderedDict()
    first_line: dict[str, str] = {}
    rotations, lines = [], []
    for where, rec in read_records(path, "pose"):
        sid = str(_field(rec, "session", where))
        index = _field(rec, "index", where)
        if not isinstance(index, int) or isinstance(index, bool):
            raise ParseError(f"{where}: pose index must be an integer")
        try:
            ts = float(_field(rec, "timestamp", where))
        except (TypeError, ValueError):
            raise ParseError(f"{where}: timestamp must be numeric") from None
        t = _floats(_field(rec, "translation", where), (3,), where, "translation")
        r = _floats(_field(rec, "rotation", where), (9,), where, "rotation").reshape(3, 3)
        rotations.append(r)
        lines.append(where)
        groups.setdefault(sid, []).append(Pose(sid, index, ts, SE3(r, t)))
        first_line.setdefault(sid, where)
    if rotations:
        rs = np.array(rotations)
        err = np.abs(np.einsum("nij,nkj->nik", rs, rs) - np.eye(3)).max(axis=(1, 2))
        bad = np.flatnonzero((err > 1e-6) | (np.linalg.det(rs) < 0))
        if len(bad):
            raise ValidationError(f"{lines[bad[0]]}: rotation is not orthonormal")
    out = []
    for sid, poses in groups.items():
        try:
            out.append(Trajectory(sid, tuple(poses)))
        except ValidationError as exc:
            raise ValidationError(f"{first_line[sid]}: {exc}") from None
    return out


# --- features / landmarks ---------------------------------------------------


def feature_record(f: Feature) -> dict:
    return {
        "type": "feature",
        "id": f.id,
        "session": f.session_id,
        "pose_index": int(f.pose_index),
        "class": f.marking.value,
        "geometry": _geometry_out(f.geometry),
    }


def save_features(path, features: Sequence[Feature]) -> None:
    write_records(path, (feature_record(f) for f in features))


def load_features(path) -> list[Feature]:
    out, seen = [], set()
    for where, rec in read_records(path, "feature"):
        fid = str(_field(rec, "id", where))
        if fid in seen:
            raise ValidationError(f"{where}: duplicate feature id {fid!r}")
        seen.add(fid)
        marking = _marking(rec, where)
        index = _field(rec, "pose_index", where)
        if not isinstance(index, int) or isinstance(index, bool):
            raise ParseError(f"{where}: pose_index must be an integer")
        try:
            out.append(Feature(fid, str(_field(rec, "session", where)), index, marking, _geometry(rec, marking, where)))
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None
    return out


def landmark_record(lm: Landmark) -> dict:
    return {"type": "landmark", "id": lm.id, "class": lm.marking.value, "geometry": _geometry_out(lm.geometry)}


def save_landmarks(path, landmarks: Sequence[Landmark]) -> None:
    write_records(path, (landmark_record(lm) for lm in landmarks))


def load_landmarks(path) -> list[Landmark]:
    out, seen = [], set()
    for where, rec in read_records(path, "landmark"):
        lid = str(_field(rec, "id", where))
        if lid in seen:
            raise ValidationError(f"{where}: duplicate landmark id {lid!r}")
        seen.add(lid)
        marking = _marking(rec, where)
        try:
            out.append(Landmark(lid, marking, _geometry(rec, marking, where)))
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None
    return out


# --- matches / correspondences ----------------------------------------------


def save_matches(path, matches: Sequence[Match]) -> None:
    write_records(
        path,
        ({"type": "match", "feature": m.feature_id, "landmark": m.landmark_id, "distance": float(m.distance)}
         for m in matches),
    )


def load_matches(path) -> list[Match]:
    out = []
    for where, rec in read_records(path, "match"):
        try:
            d = float(_field(rec, "distance", where))
        except (TypeError, ValueError):
            raise ParseError(f"{where}: distance must be numeric") from None
        out.append(Match(str(_field(rec, "feature", where)), str(_field(rec, "landmark", where)), d))
    return out


def save_correspondences(path, truth: Mapping[str, str]) -> None:
    write_records(path, ({"type": "correspondence", "feature": f, "landmark": lm} for f, lm in truth.items()))


def load_correspondences(path) -> dict[str, str]:
    return {
        str(_field(rec, "feature", where)): str(_field(rec, "landmark", where))
        for where, rec in read_records(path, "correspondence")
    }


def check_references(
    trajs: Sequence[Trajectory],
    features: Sequence[Feature],
    landmarks: Sequence[Landmark] = (),
    matches: Sequence[Match] = (),
) -> None:
    """Every feature must hang off an existing pose; every match must name known ids."""
    poses = {(t.session_id, p.index) for t in trajs for p in t.poses}
    for f in features:
        if f.anchor not in poses:
            raise ValidationError(
                f"feature {f.id!r} references missing pose {f.pose_index} of session {f.session_id!r}"
            )
    fids = {f.id for f in features}
    lids = {lm.id for lm in landmarks}
    for m in matches:
        if m.feature_id not in fids:
            raise ValidationError(f"match references unknown feature {m.feature_id!r}")
        if m.landmark_id not in lids:
            raise ValidationError(f"match references unknown landmark {m.landmark_id!r}")
