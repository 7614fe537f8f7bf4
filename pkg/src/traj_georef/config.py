"""TOML run configuration.

Exactly one of ``[input]`` (existing files) or ``[synthetic]`` (generated
scene) must be present.  ``[match]``, ``[align]`` and ``[output]`` are optional.
Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .alignment import AlignParams
from .errors import ConfigError
from .markings import MarkingClass
from .model import MatchParams
from .solver import SolverOptions
from .synthbench import (
    DriftSpec,
    ObservationSpec,
    SceneSpec,
    reference_densities,
    reference_detection_rates,
)


@dataclass
class InputPaths:
    trajectories: Path
    features: Path
    landmarks: Path
    ground_truth: Optional[Path] = None
    correspondences: Optional[Path] = None


@dataclass
class SyntheticConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    drift: DriftSpec = field(default_factory=DriftSpec)
    observation: ObservationSpec = field(default_factory=ObservationSpec)
    seed: int = 0


@dataclass
class OutputConfig:
    directory: Path = Path("out")
    overlay: bool = True
    report: bool = True
    tolerance: float = 0.2


@dataclass
class PipelineConfig:
    input: Optional[InputPaths] = None
    synthetic: Optional[SyntheticConfig] = None
    match: MatchParams = field(default_factory=MatchParams)
    align: AlignParams = field(default_factory=AlignParams)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        if (self.input is None) == (self.synthetic is None):
            raise ConfigError("exactly one of [input] or [synthetic] must be given")

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Same configuration with every random stream re-seeded from ``seed``."""
        syn = self.synthetic
        if syn is not None:
            syn = _seeded(syn.scene, syn.drift, syn.observation, seed)
        return dataclasses.replace(self, synthetic=syn, match=dataclasses.replace(self.match, rng_seed=seed))

    def with_output(self, directory) -> "PipelineConfig":
        return dataclasses.replace(self, output=dataclasses.replace(self.output, directory=Path(directory)))


def _seeded(scene: SceneSpec, drift: DriftSpec, obs: ObservationSpec, seed: int) -> SyntheticConfig:
    return SyntheticConfig(
        dataclasses.replace(scene, rng_seed=seed),
        drift,
        dataclasses.replace(obs, rng_seed=seed + 1),
        seed,
    )


def _take(table: dict, section: str, allowed) -> dict:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"[{section}]: unknown key(s) {', '.join(unknown)}")
    return dict(table)


def _build(cls, kwargs: dict, section: str):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def _class_table(value, section: str, default) -> dict:
    if value == "reference":
        return default()
    if not isinstance(value, dict):
        raise ConfigError(f"[{section}]: expected \"reference\" or a table of per-class values")
    out = {}
    for k, v in value.items():
        try:
            out[MarkingClass.parse(k)] = float(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    return out


def _parse_synthetic(t: dict) -> SyntheticConfig:
    t = _take(t, "synthetic", ("seed", "scene", "drift", "observation"))
    seed = t.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("[synthetic]: seed must be an integer")

    scene_keys = {f.name for f in dataclasses.fields(SceneSpec)} - {"rng_seed"}
    st = _take(t.get("scene", {}), "synthetic.scene", scene_keys)
    if "road_lengths" in st:
        st["road_lengths"] = tuple(st["road_lengths"])
    if "densities" in st:
        st["densities"] = _class_table(st["densities"], "synthetic.scene", reference_densities)
    scene = _build(SceneSpec, st, "synthetic.scene")

    dt = _take(
        t.get("drift", {}), "synthetic.drift",
        ("amplitude", "wavelength", "heading_amplitude_deg", "bias", "heading_bias_deg"),
    )
    for key in ("heading_amplitude", "heading_bias"):
        if f"{key}_deg" in dt:
            dt[key] = math.radians(dt.pop(f"{key}_deg"))
    if "bias" in dt:
        dt["bias"] = tuple(dt["bias"])
        if len(dt["bias"]) != 2:
            raise ConfigError("[synthetic.drift]: bias must have two components")
    drift = _build(DriftSpec, dt, "synthetic.drift")

    ot = _take(t.get("observation", {}), "synthetic.observation", ("detection_probability", "sigma", "max_range"))
    prob = ot.get("detection_probability")
    if isinstance(prob, (str, dict)):
        ot["detection_probability"] = _class_table(prob, "synthetic.observation", reference_detection_rates)
    obs = _build(ObservationSpec, ot, "synthetic.observation")
    return _seeded(scene, drift, obs, seed)


def _parse_input(t: dict, base: Path) -> InputPaths:
    t = _take(t, "input", ("trajectories", "features", "landmarks", "ground_truth", "correspondences"))
    for key in ("trajectories", "features", "landmarks"):
        if key not in t:
            raise ConfigError(f"[input]: missing {key!r}")
    paths = {}
    for key, value in t.items():
        p = Path(value)
        p = p if p.is_absolute() else base / p
        if not p.is_file():
            raise ConfigError(f"[input]: {key} file {p} is not readable")
        paths[key] = p
    return InputPaths(**paths)


def _parse_match(t: dict) -> MatchParams:
    keys = {f.name for f in dataclasses.fields(MatchParams)} - {"gate_angle"} | {"gate_angle_deg"}
    t = _take(t, "match", keys)
    if "gate_angle_deg" in t:
        t["gate_angle"] = math.radians(t.pop("gate_angle_deg"))
    return _build(MatchParams, t, "match")


def _parse_align(t: dict) -> AlignParams:
    keys = {f.name for f in dataclasses.fields(AlignParams)}
    t = _take(t, "align", keys)
    if "solver" in t:
        skeys = {f.name for f in dataclasses.fields(SolverOptions)}
        t["solver"] = _build(SolverOptions, _take(t["solver"], "align.solver", skeys), "align.solver")
    return _build(AlignParams, t, "align")


def parse_config(data: dict, base: Path = Path(".")) -> PipelineConfig:
    _take(data, "config", ("input", "synthetic", "match", "align", "output"))
    out_t = _take(data.get("output", {}), "output", ("directory", "overlay", "report", "tolerance"))
    if "directory" in out_t:
        d = Path(out_t["directory"])
        out_t["directory"] = d if d.is_absolute() else base / d
    else:
        out_t["directory"] = base / "out"
    return PipelineConfig(
        input=_parse_input(data["input"], base) if "input" in data else None,
        synthetic=_parse_synthetic(data["synthetic"]) if "synthetic" in data else None,
        match=_parse_match(data.get("match", {})),
        align=_parse_align(data.get("align", {})),
        output=_build(OutputConfig, out_t, "output"),
    )


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, path.parent)
