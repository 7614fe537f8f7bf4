from __future__ import annotations

from enum import Enum


class MarkingClass(str, Enum):
    """Feature / landmark classes observable both from the vehicle and from above."""

    CURB_LINE = "curb_line"
    DASHED_LINE_12CM = "dashed_line_12cm"
    DASHED_LINE_25CM = "dashed_line_25cm"
    LINE_12CM = "line_12cm"
    LINE_25CM = "line_25cm"
    ARROW_LINE = "arrow_line"
    STOP_LINE = "stop_line"
    PEDESTRIAN_ROAD_LINE = "pedestrian_road_line"
    ZEBRA_LINE = "zebra_line"
    BICYCLE_ROAD_LINE = "bicycle_road_line"
    POLE = "pole"

    @property
    def is_pole(self) -> bool:
        return self is MarkingClass.POLE

    @classmethod
    def parse(cls, text: str) -> "MarkingClass":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown marking class {text!r}") from None

    def __str__(self) -> str:
        return self.value


SEGMENT_CLASSES = tuple(c for c in MarkingClass if not c.is_pole)
