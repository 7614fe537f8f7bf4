"""Stage orchestration: generate -> match -> align -> evaluate, chained through files.

Every stage reads its inputs from disk and writes its outputs to the output
directory, so ``run_pipeline`` produces exactly what the individual stages
produce when invoked one after another.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .alignment import align
from .config import PipelineConfig
from .errors import ConfigError, GeorefError, IoError, ValidationError
from .geometry import SegmentChain, closest_on_chain
from .matching import match_all
from .model import Feature, Landmark, Match, Trajectory, feature_world_position
from .synthbench import class_table, evaluate_alignment, generate_scene, observe_features, perturb_trajectory

log = logging.getLogger(__name__)

# file names inside the output directory
LANDMARKS = "landmarks.ndjson"
GROUND_TRUTH = "ground_truth.ndjson"
INITIAL = "initial.ndjson"
FEATURES = "features.ndjson"
CORRESPONDENCES = "correspondences.ndjson"
MATCHES = "matches.ndjson"
WINDOWS = "windows.json"
ALIGNED = "aligned.ndjson"
ALIGN_REPORT = "align_report.json"
METRICS = "metrics.json"
REPORT = "report.txt"
OVERLAY = "overlay.geojson"

STAGES = ("generate", "match", "align", "evaluate")


@contextlib.contextmanager
def stage(name: str):
    """Tag any package error escaping the block with the stage it came from."""
    log.info("stage %s", name)
    try:
        yield
    except GeorefError as exc:
        if getattr(exc, "stage", None) is None:
            exc.stage = name
        raise


def _write_json(path: Path, obj, compact: bool = False) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if compact:
                json.dump(obj, fh, separators=(",", ":"), sort_keys=True, allow_nan=False)
            else:
                json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_json(path: Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _finite(x: float) -> Optional[float]:
    return float(x) if math.isfinite(x) else None


@dataclass
class InputFiles:
    trajectories: Path
    features: Path
    landmarks: Path
    ground_truth: Optional[Path]
    correspondences: Optional[Path]


def input_files(cfg: PipelineConfig) -> InputFiles:
    if cfg.input is not None:
        i = cfg.input
        return InputFiles(i.trajectories, i.features, i.landmarks, i.ground_truth, i.correspondences)
    out = cfg.output.directory
    return InputFiles(out / INITIAL, out / FEATURES, out / LANDMARKS, out / GROUND_TRUTH, out / CORRESPONDENCES)


def load_inputs(cfg: PipelineConfig) -> tuple[list[Trajectory], list[Feature], list[Landmark]]:
    """Initial trajectories, features and landmarks, with cross-references checked."""
    files = input_files(cfg)
    for p in (files.trajectories, files.features, files.landmarks):
        if not p.is_file():
            hint = " (run the generate stage first)" if cfg.synthetic is not None else ""
            raise IoError(f"missing input file {p}{hint}")
    trajs = io.load_trajectories(files.trajectories)
    features = io.load_features(files.features)
    landmarks = io.load_landmarks(files.landmarks)
    io.check_references(trajs, features, landmarks)
    return trajs, features, landmarks


# --- stages ------------------------------------------------------------------


def generate(cfg: PipelineConfig) -> dict[str, Path]:
    if cfg.synthetic is None:
        raise ConfigError("the generate stage needs a [synthetic] section")
    syn = cfg.synthetic
    out = cfg.output.directory
    landmarks, gts = generate_scene(syn.scene)
    features: list[Feature] = []
    truth: dict[str, str] = {}
    initial = []
    for k, gt in enumerate(gts):
        f, c = observe_features(gt, landmarks, syn.observation)
        features.extend(f)
        truth.update(c)
        initial.append(perturb_trajectory(gt, syn.drift, np.random.default_rng([syn.seed, 7, k])))
    log.info("generated %d landmarks, %d sessions, %d features", len(landmarks), len(gts), len(features))
    io.save_landmarks(out / LANDMARKS, landmarks)
    io.save_trajectories(out / GROUND_TRUTH, gts)
    io.save_trajectories(out / INITIAL, initial)
    io.save_features(out / FEATURES, features)
    io.save_correspondences(out / CORRESPONDENCES, truth)
    return {name: out / name for name in (LANDMARKS, GROUND_TRUTH, INITIAL, FEATURES, CORRESPONDENCES)}


def match(cfg: PipelineConfig) -> dict[str, Path]:
    trajs, features, landmarks = load_inputs(cfg)
    matches, results = match_all(trajs, features, landmarks, cfg.match)
    out = cfg.output.directory
    io.save_matches(out / MATCHES, matches)
    windows = [
        {
            "window": r.window_id,
            "status": r.status,
            "e_f": _finite(r.e_f),
            "e_limit": r.e_limit,
            "inliers": len(r.inliers),
            "hypotheses": r.hypotheses,
            "transform": None if r.transform is None else list(r.transform.as_tuple()),
        }
        for r in results
    ]
    _write_json(out / WINDOWS, {"schema": io.SCHEMA_VERSION, "windows": windows})
    log.info("matched %d of %d features in %d windows", len(matches), len(features), len(results))
    return {MATCHES: out / MATCHES, WINDOWS: out / WINDOWS}


def align_stage(cfg: PipelineConfig) -> dict[str, Path]:
    trajs, features, landmarks = load_inputs(cfg)
    out = cfg.output.directory
    if not (out / MATCHES).is_file():
        raise IoError(f"missing {out / MATCHES} (run the match stage first)")
    matches = io.load_matches(out / MATCHES)
    io.check_references(trajs, features, landmarks, matches)
    aligned, report = align(trajs, matches, landmarks, features, cfg.align)
    io.save_trajectories(out / ALIGNED, aligned)
    rep = asdict(report)
    rep["match_residuals"] = [asdict(m) for m in report.match_residuals]
    rep["initial_cost"] = report.initial_cost
    rep["final_cost"] = report.final_cost
    rep["monotone"] = bool(np.all(np.diff(report.cost_history) <= 0.0))
    rep["schema"] = io.SCHEMA_VERSION
    _write_json(out / ALIGN_REPORT, rep, compact=True)
    return {ALIGNED: out / ALIGNED, ALIGN_REPORT: out / ALIGN_REPORT}


def session_match_table(features: Sequence[Feature], matches: Sequence[Match], truth=None) -> list[dict]:
    """Per class: detected features and matched share for each session."""
    sessions = sorted({f.session_id for f in features})
    rows = {}
    for sid in sessions:
        sf = [f for f in features if f.session_id == sid]
        for c in class_table(sf, matches, truth):
            rows.setdefault(c.marking, {})[sid] = {"features": c.features, "matched": c.matched,
                                                   "matched_share": c.matched_share}
    table = []
    for cls, per in rows.items():
        total = sum(v["features"] for v in per.values())
        table.append({"class": cls, "total": total, "sessions": per})
    table.sort(key=lambda r: (-r["total"], r["class"]))
    return table


def format_report(metrics: dict) -> str:
    lines = []
    a = metrics.get("alignment")
    if a is not None:
        lines += [
            "Alignment against ground truth",
            f"  position RMSE   {a['position_rmse']:.4f} m   (max {a['position_max']:.4f} m)",
            f"  heading RMSE    {math.degrees(a['heading_rmse']):.4f} deg (max {math.degrees(a['heading_max']):.4f} deg)",
            f"  match precision {a['precision']:.4f}   recall {a['recall']:.4f}",
            f"  arc within {a['tolerance']:.2f} m: {100 * a['fraction_within']:.2f} %",
            "",
        ]
    o = metrics.get("optimization")
    if o is not None:
        lines += [
            "Optimization",
            f"  cost {o['initial_cost']:.6g} -> {o['final_cost']:.6g} in {o['iterations']} iterations ({o['termination']})",
            f"  {o['n_matches']} matches, {o['n_pairs']} relative-pose pairs",
            "",
        ]
    table = metrics["match_table"]
    sessions = sorted({s for row in table for s in row["sessions"]})
    width = max([len("class")] + [len(r["class"]) for r in table]) + 2
    lines.append("Matched features per class: count (% matched)")
    lines.append("class".ljust(width) + "".join(s.rjust(16) for s in sessions))
    for row in table:
        cells = []
        for s in sessions:
            v = row["sessions"].get(s)
            cells.append(("-" if v is None else f"{v['features']} ({100 * v['matched_share']:.1f})").rjust(16))
        lines.append(row["class"].replace("_", " ").ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"


def evaluate(cfg: PipelineConfig) -> dict[str, Path]:
    files = input_files(cfg)
    out = cfg.output.directory
    initial, features, landmarks = load_inputs(cfg)
    for name in (MATCHES, ALIGNED):
        if not (out / name).is_file():
            raise IoError(f"missing {out / name} (run the earlier stages first)")
    matches = io.load_matches(out / MATCHES)
    aligned = io.load_trajectories(out / ALIGNED)
    io.check_references(aligned, features, landmarks, matches)

    truth = None
    if files.correspondences is not None and files.correspondences.is_file():
        truth = io.load_correspondences(files.correspondences)
    metrics: dict = {"schema": io.SCHEMA_VERSION, "alignment": None, "optimization": None}
    if files.ground_truth is not None and files.ground_truth.is_file():
        gt = io.load_trajectories(files.ground_truth)
        m = evaluate_alignment(aligned, gt, matches, truth or {}, features, cfg.output.tolerance)
        metrics["alignment"] = m.to_dict()
    if (out / ALIGN_REPORT).is_file():
        rep = _read_json(out / ALIGN_REPORT)
        metrics["optimization"] = {k: rep[k] for k in (
            "initial_cost", "final_cost", "iterations", "termination", "n_matches", "n_pairs", "monotone")}
    metrics["n_features"] = len(features)
    metrics["n_matches"] = len(matches)
    metrics["match_table"] = session_match_table(features, matches, truth)

    written = {METRICS: out / METRICS}
    _write_json(out / METRICS, metrics)
    if cfg.output.report:
        try:
            (out / REPORT).write_text(format_report(metrics), encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write {out / REPORT}: {exc}") from exc
        written[REPORT] = out / REPORT
    if cfg.output.overlay:
        export_overlay(initial, aligned, landmarks, matches, out / OVERLAY, features)
        written[OVERLAY] = out / OVERLAY
    return written


@dataclass
class RunResult:
    status: int
    artifacts: dict = field(default_factory=dict)
    metrics: Optional[dict] = None


def run_pipeline(cfg: PipelineConfig) -> RunResult:
    """Run all stages in order; errors propagate tagged with their stage name."""
    artifacts: dict[str, Path] = {}
    if cfg.synthetic is not None:
        with stage("generate"):
            artifacts.update(generate(cfg))
    with stage("match"):
        artifacts.update(match(cfg))
    with stage("align"):
        artifacts.update(align_stage(cfg))
    with stage("evaluate"):
        artifacts.update(evaluate(cfg))
    return RunResult(0, artifacts, _read_json(artifacts[METRICS]))


# --- overlay ------------------------------------------------------------------


def _line(coords) -> dict:
    return {"type": "LineString", "coordinates": [[float(x), float(y)] for x, y in coords]}


def _feature(geometry: dict, **props) -> dict:
    return {"type": "Feature", "geometry": geometry, "properties": props}


def export_overlay(
    before: Sequence[Trajectory],
    after: Sequence[Trajectory],
    landmarks: Sequence[Landmark],
    matches: Sequence[Match],
    path,
    features: Sequence[Feature] = (),
) -> None:
    """GeoJSON FeatureCollection for visual inspection.

    Layers (``properties.layer``): ``initial_trajectory``, ``aligned_trajectory``,
    ``landmarks`` and ``match_displacement``.  A displacement is the segment from a
    matched feature, placed with its initial anchor pose, to the closest point of
    its landmark.
    """
    items = []
    for layer, trajs in (("initial_trajectory", before), ("aligned_trajectory", after)):
        for t in trajs:
            items.append(_feature(_line(t.positions()[:, :2]), layer=layer, session=t.session_id))
    for lm in landmarks:
        g = lm.geometry
        if isinstance(g, SegmentChain):
            geom = _line(g.vertices)
        else:
            geom = {"type": "Point", "coordinates": [float(g[0]), float(g[1])]}
        items.append(_feature(geom, layer="landmarks", id=lm.id, **{"class": lm.marking.value}))

    if matches:
        fmap = {f.id: f for f in features}
        lmap = {lm.id: lm for lm in landmarks}
        poses = {(t.session_id, p.index): p.transform for t in before for p in t.poses}
        for m in matches:
            if m.feature_id not in fmap or m.landmark_id not in lmap:
                raise ValidationError(f"overlay: match {m.feature_id}->{m.landmark_id} names unknown ids")
            f, lm = fmap[m.feature_id], lmap[m.landmark_id]
            g = feature_world_position(f, poses[f.anchor])
            if isinstance(g, SegmentChain):
                start = g.vertices.mean(axis=0)
                end = closest_on_chain(start[None], lm.geometry.vertices)[0][0]
            else:
                start, end = g, lm.geometry
            items.append(_feature(
                _line([start, end]), layer="match_displacement", feature=f.id, landmark=lm.id,
                distance=float(m.distance), **{"class": f.marking.value},
            ))
    _write_json(Path(path), {"type": "FeatureCollection", "features": items}, compact=True)


__all__ = [
    "STAGES",
    "RunResult",
    "load_inputs",
    "generate",
    "match",
    "align_stage",
    "evaluate",
    "run_pipeline",
    "export_overlay",
    "format_report",
    "session_match_table",
]
