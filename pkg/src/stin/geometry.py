"""Boxes in pixel corner format and the normalized (cx, cy, w, h) quadruple."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

HAND = "hand"
OBJECT = "object"
CATEGORIES = (HAND, OBJECT)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    category: str = OBJECT
    instance_id: Optional[str] = None
    score: Optional[float] = None

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box corners out of order: {(self.x1, self.y1, self.x2, self.y2)}")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown box category {self.category!r}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def corners(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def clamp(self, width: float, height: float) -> "Box":
        x1 = min(max(self.x1, 0.0), width)
        x2 = min(max(self.x2, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        y2 = min(max(self.y2, 0.0), height)
        if (x1, y1, x2, y2) == (self.x1, self.y1, self.x2, self.y2):
            return self
        return replace(self, x1=x1, y1=y1, x2=x2, y2=y2)


class Quad(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


ZERO_QUAD = Quad(0.0, 0.0, 0.0, 0.0)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def encode(box: Optional[Box], frame_w: float, frame_h: float) -> Quad:
    """Normalize a pixel box to a center/size quadruple; ``None`` maps to the zero quad."""
    if frame_w <= 0 or frame_h <= 0:
        raise ValueError(f"frame dimensions must be positive, got {frame_w}x{frame_h}")
    if box is None:
        return ZERO_QUAD
    b = box.clamp(frame_w, frame_h)
    return Quad(
        (b.x1 + b.x2) / 2.0 / frame_w,
        (b.y1 + b.y2) / 2.0 / frame_h,
        (b.x2 - b.x1) / frame_w,
        (b.y2 - b.y1) / frame_h,
    )


def decode(q: Quad, frame_w: float, frame_h: float, category: str = OBJECT) -> Box:
    cx, cy = q.cx * frame_w, q.cy * frame_h
    hw, hh = q.w * frame_w / 2.0, q.h * frame_h / 2.0
    return Box(cx - hw, cy - hh, cx + hw, cy + hh, category=category)
