"""Axis-aligned box primitives, overlap measures, and duplicate suppression.

All coordinates are normalized to [0, 1] in corner form (x_min, y_min,
x_max, y_max). Every function here is pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized corner coordinates.

    Degenerate boxes (zero width or height) are rejected at construction
    rather than silently clamped.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (0.0 <= self.x_min < self.x_max <= 1.0):
            raise ValueError(
                f"invalid x extent: x_min={self.x_min}, x_max={self.x_max}"
            )
        if not (0.0 <= self.y_min < self.y_max <= 1.0):
            raise ValueError(
                f"invalid y extent: y_min={self.y_min}, y_max={self.y_max}"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class Point:
    """A point in normalized image coordinates."""

    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"point outside [0,1]^2: ({self.x}, {self.y})")


def intersection_area(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU in (-1, 1].

    Subtracts from plain IoU the fraction of the smallest enclosing box
    not covered by the union, penalizing separated boxes.
    """
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    enclosure = (max(a.x_max, b.x_max) - min(a.x_min, b.x_min)) * (
        max(a.y_max, b.y_max) - min(a.y_min, b.y_min)
    )
    return inter / union - (enclosure - union) / enclosure


def box_area_pixels(b: Box, image_w: int, image_h: int) -> float:
    """Box area in pixels for an image of the given size."""
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    return b.width * image_w * b.height * image_h


def nms(
    boxes: list[Box], scores: list[float], iou_threshold: float
) -> list[int]:
    """Greedy score-descending non-maximum suppression.

    Returns the indices of the surviving boxes, highest score first.
    Disabled by default in the detection pipeline (set-prediction decoders
    are trained to avoid duplicates); exposed for toy-model duplicates.
    """
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in (0,1], got {iou_threshold}")
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores must have equal length")
    order = sorted(range(len(boxes)), key=lambda i: scores[i], reverse=True)
    keep: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= iou_threshold for j in keep):
            keep.append(i)
    return keep
