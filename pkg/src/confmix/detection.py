"""Box geometry, Gaussian-box confidences and class-aware NMS.

Boxes are stored center-normalized (cx, cy, w, h) in [0, 1] image units;
corner form is derived on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence, Tuple

Score = Callable[["Detection"], float]


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center outside the unit square: {self}")
        if not (self.w > 0.0 and self.h > 0.0):
            raise ValueError(f"box extents must be positive: {self}")

    @classmethod
    def from_xyxy(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def xyxy(self) -> Tuple[float, float, float, float]:
        hw, hh = self.w / 2, self.h / 2
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    def clipped(self) -> "Box":
        """Same box with its corner form clipped to the unit square."""
        x0, y0, x1, y1 = self.xyxy()
        return Box.from_xyxy(max(x0, 0.0), max(y0, 0.0), min(x1, 1.0), min(y1, 1.0))

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class GaussianBox:
    """Per-coordinate means ``mu`` and squashed variances ``sigma``."""

    mu: Box
    sigma: Tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.sigma) != 4:
            raise ValueError("expected four variances")
        # closed interval: float64 sigmoid saturates to exactly 0 or 1
        if any(not (0.0 <= s <= 1.0) for s in self.sigma):
            raise ValueError(f"variances must lie in [0, 1]: {self.sigma}")
        object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))


def box_confidence(gbox: GaussianBox | Sequence[float]) -> float:
    """One minus the mean predicted coordinate variance."""
    sigma = gbox.sigma if isinstance(gbox, GaussianBox) else tuple(gbox)
    return 1.0 - sum(sigma) / len(sigma)


def combined_confidence(c_det: float, c_box: float) -> float:
    return c_det * c_box


@dataclass(frozen=True)
class Detection:
    gbox: GaussianBox
    class_id: int
    c_det: float
    c_box: float
    c_comb: float

    @classmethod
    def create(cls, gbox: GaussianBox, class_id: int, c_det: float) -> "Detection":
        c_box = box_confidence(gbox)
        return cls(gbox, int(class_id), float(c_det), c_box, combined_confidence(c_det, c_box))

    @property
    def box(self) -> Box:
        return self.gbox.mu

    def with_box(self, box: Box) -> "Detection":
        return replace(self, gbox=replace(self.gbox, mu=box))


def by_det(d: Detection) -> float:
    return d.c_det


def by_comb(d: Detection) -> float:
    return d.c_comb


def iou_xyxy(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two corner-form boxes ``(x0, y0, x1, y1)``."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0.0 else 0.0


def iou(a: Box, b: Box) -> float:
    return iou_xyxy(a.xyxy(), b.xyxy())


def nms(
    dets: Iterable[Detection],
    iou_thresh: float = 0.5,
    conf_thresh: float = 0.25,
    score: Score = by_det,
) -> list[Detection]:
    """Greedy class-aware non-maximum suppression.

    Detections scoring below ``conf_thresh`` are dropped, the rest are visited
    in descending score order (ties broken by input position) and any
    same-class detection overlapping a kept one by more than ``iou_thresh``
    is suppressed. The result is sorted by descending score.
    """
    scored = [(score(d), i, d) for i, d in enumerate(dets)]
    scored = [t for t in scored if t[0] >= conf_thresh]
    scored.sort(key=lambda t: (-t[0], t[1]))

    kept: list[Detection] = []
    kept_corners: dict[int, list[Tuple[float, float, float, float]]] = {}
    for _, _, d in scored:
        corners = d.box.xyxy()
        same = kept_corners.setdefault(d.class_id, [])
        if any(iou_xyxy(corners, k) > iou_thresh for k in same):
            continue
        same.append(corners)
        kept.append(d)
    return kept
