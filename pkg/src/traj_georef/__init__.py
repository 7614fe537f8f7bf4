"""Geo-referencing of vehicle trajectories against an aerial-image landmark map."""

from .errors import (
    ConfigError,
    EmptyInput,
    GeorefError,
    IncompatibleMatch,
    InsufficientCandidates,
    IoError,
    LengthMismatch,
    NoMatchesWarning,
    NumericalFailure,
    ParseError,
    ValidationError,
)
from .geometry import SE2, SE3, SegmentChain, feature_distance, modified_hausdorff
from .markings import MarkingClass
from .model import Feature, Landmark, Match, MatchParams, Pose, Trajectory

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EmptyInput",
    "GeorefError",
    "IncompatibleMatch",
    "InsufficientCandidates",
    "IoError",
    "LengthMismatch",
    "NoMatchesWarning",
    "NumericalFailure",
    "ParseError",
    "ValidationError",
    "SE2",
    "SE3",
    "SegmentChain",
    "feature_distance",
    "modified_hausdorff",
    "MarkingClass",
    "Feature",
    "Landmark",
    "Match",
    "MatchParams",
    "Pose",
    "Trajectory",
]
