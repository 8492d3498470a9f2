"""Bounding-box representations, conversions, and overlap measures.

Canonical internal format is center-form (cx, cy, w, h). Scene boxes are
normalized to [0, 1]; the conversion helpers also accept unnormalized pixel
boxes (the evaluator works on pixel ltwh directly).
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class GeometryError(ValueError):
    """Raised for degenerate boxes (non-positive width or height)."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in center format (cx, cy, w, h), w > 0 and h > 0."""

    cx: float
    cy: float
    w: float
    h: float

    def validate(self) -> "BBox":
        if not (self.w > 0.0 and self.h > 0.0):
            raise GeometryError(f"degenerate box: w={self.w}, h={self.h}")
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise GeometryError(f"non-finite box: {self}")
        return self

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_ltrb(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    def to_ltwh(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    @staticmethod
    def from_ltrb(l: float, t: float, r: float, b: float) -> "BBox":
        return BBox((l + r) / 2.0, (t + b) / 2.0, r - l, b - t)

    @staticmethod
    def from_ltwh(l: float, t: float, w: float, h: float) -> "BBox":
        return BBox(l + w / 2.0, t + h / 2.0, w, h)


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1]. Symmetric."""
    a.validate()
    b.validate()
    al, at, ar, ab = a.to_ltrb()
    bl, bt, br, bb = b.to_ltrb()
    iw = min(ar, br) - max(al, bl)
    ih = min(ab, bb) - max(at, bt)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU in [-1, 1]: iou minus the spread of the enclosing box.

    Equals iou when the smallest enclosing box has the same area as the
    union; tends to -1 as the boxes separate.
    """
    a.validate()
    b.validate()
    al, at, ar, ab = a.to_ltrb()
    bl, bt, br, bb = b.to_ltrb()
    iw = min(ar, br) - max(al, bl)
    ih = min(ab, bb) - max(at, bt)
    inter = iw * ih if (iw > 0.0 and ih > 0.0) else 0.0
    union = a.area + b.area - inter
    cw = max(ar, br) - min(al, bl)
    ch = max(ab, bb) - min(at, bt)
    enclosing = cw * ch
    return inter / union - (enclosing - union) / enclosing


def l1_box(a: BBox, b: BBox) -> float:
    """Sum of absolute differences over (cx, cy, w, h).

    Both boxes must use the same coordinate convention; mixing conventions
    is a caller bug and is not detected here.
    """
    return (
        abs(a.cx - b.cx) + abs(a.cy - b.cy) + abs(a.w - b.w) + abs(a.h - b.h)
    )
