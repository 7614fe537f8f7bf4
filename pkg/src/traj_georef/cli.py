"""Command line entry point: ``traj-georef <stage> --config run.toml``."""

from __future__ import annotations

import argparse
import logging
import sys
import warnings

from . import pipeline
from .config import load_config
from .errors import ConfigError, GeorefError, IoError, LengthMismatch, NumericalFailure, ParseError, ValidationError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("traj_georef")


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (ParseError, ValidationError, LengthMismatch, IoError)):
        return EXIT_INPUT
    if isinstance(exc, NumericalFailure):
        return EXIT_NUMERICAL
    return EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="traj-georef",
        description="Geo-reference vehicle trajectories against landmarks labelled in aerial imagery.",
    )
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "write a synthetic scene (landmarks, trajectories, features, ground truth)",
        "match": "associate features with landmarks window by window",
        "align": "optimize all poses against the matches",
        "evaluate": "write metrics, text report and GeoJSON overlay",
        "run": "all stages in sequence",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", help="output directory (overrides [output] directory)")
        p.add_argument("--seed", type=int, help="re-seed every random stream")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return ap


STAGE_FUNCS = {
    "generate": pipeline.generate,
    "match": pipeline.match,
    "align": pipeline.align_stage,
    "evaluate": pipeline.evaluate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logging.captureWarnings(True)
    warnings.simplefilter("default")
    try:
        cfg = load_config(args.config)
        if args.out:
            cfg = cfg.with_output(args.out)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command == "run":
            result = pipeline.run_pipeline(cfg)
            paths = result.artifacts.values()
        else:
            with pipeline.stage(args.command):
                paths = STAGE_FUNCS[args.command](cfg).values()
    except GeorefError as exc:
        where = getattr(exc, "stage", None)
        prefix = f"{where}: " if where else ""
        log.error("%s%s", prefix, exc)
        return exit_code(exc)
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
