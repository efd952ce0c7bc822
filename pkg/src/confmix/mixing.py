"""Confidence-based region mixing and the merged pseudo-label set.

Regions are half-open pixel rectangles ``(x0, y0, x1, y1)``; every strategy
produces a set of regions that tiles the image exactly. The mask is an
``(H, W)`` array that is 1 where the mixed image takes source pixels and 0
inside the selected target region(s).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .detection import Box, Detection, Score, by_det

Rect = tuple[int, int, int, int]
BOX_EPS = 1e-3


class MixStrategy(str, enum.Enum):
    FOUR_DIVISION = "four_division"
    SIX_DIVISION = "six_division"
    NINE_DIVISION = "nine_division"
    VERTICAL_HALVES = "vertical_halves"
    HORIZONTAL_HALVES = "horizontal_halves"
    TWO_REGION = "two_region"
    CUTMIX_RANDOM = "cutmix_random"


# (rows, cols) of the grid strategies
_GRIDS = {
    MixStrategy.FOUR_DIVISION: (2, 2),
    MixStrategy.SIX_DIVISION: (2, 3),
    MixStrategy.NINE_DIVISION: (3, 3),
    MixStrategy.VERTICAL_HALVES: (1, 2),
    MixStrategy.HORIZONTAL_HALVES: (2, 1),
    MixStrategy.TWO_REGION: (2, 2),
}


@dataclass
class MixPlan:
    strategy: MixStrategy
    width: int
    height: int
    regions: list[Rect]
    region_conf: list[Optional[float]]  # None marks an empty region
    selected: tuple[int, ...]
    mask: np.ndarray
    no_mix: bool = False

    def selected_rects(self) -> list[Rect]:
        return [self.regions[i] for i in self.selected]


def grid_regions(rows: int, cols: int, width: int, height: int) -> list[Rect]:
    """Row-major rectangles of an even rows x cols split."""
    xs = [k * width // cols for k in range(cols + 1)]
    ys = [k * height // rows for k in range(rows + 1)]
    return [(xs[c], ys[r], xs[c + 1], ys[r + 1]) for r in range(rows) for c in range(cols)]


def strategy_regions(strategy: MixStrategy, width: int, height: int) -> list[Rect]:
    return grid_regions(*_GRIDS[MixStrategy(strategy)], width, height)


def cutmix_rect(rng: np.random.Generator, width: int, height: int,
                area_range=(0.25, 0.5), aspect_range=(0.5, 2.0)) -> Rect:
    """Random rectangle: area fraction and aspect ratio uniform, position uniform."""
    area = rng.uniform(*area_range) * width * height
    aspect = rng.uniform(*aspect_range)
    w = min(width, max(1, int(round(math.sqrt(area * aspect)))))
    h = min(height, max(1, int(round(math.sqrt(area / aspect)))))
    x0 = int(rng.integers(0, width - w + 1))
    y0 = int(rng.integers(0, height - h + 1))
    return (x0, y0, x0 + w, y0 + h)


def tiling_around(rect: Rect, width: int, height: int) -> list[Rect]:
    """``rect`` first, then the non-empty bands that complete a tiling of the image."""
    x0, y0, x1, y1 = rect
    bands = [(0, 0, width, y0), (0, y1, width, height), (0, y0, x0, y1), (x1, y0, width, y1)]
    return [rect] + [b for b in bands if b[2] > b[0] and b[3] > b[1]]


def _region_index(px: float, py: float, regions: Sequence[Rect], width: int, height: int) -> int:
    # the right and bottom image borders belong to the last region
    px = min(px, np.nextafter(width, 0))
    py = min(py, np.nextafter(height, 0))
    xs = np.array([r[0] for r in regions]), np.array([r[2] for r in regions])
    ys = np.array([r[1] for r in regions]), np.array([r[3] for r in regions])
    inside = (xs[0] <= px) & (px < xs[1]) & (ys[0] <= py) & (py < ys[1])
    return int(np.argmax(inside))


def assign_regions(dets: Sequence[Detection], regions: Sequence[Rect], width: int, height: int) -> list[list[Detection]]:
    """Bucket detections by the region holding their box center."""
    out: list[list[Detection]] = [[] for _ in regions]
    for d in dets:
        out[_region_index(d.box.cx * width, d.box.cy * height, regions, width, height)].append(d)
    return out


def region_confidence(dets_in_region: Sequence[Detection], score: Score = by_det) -> Optional[float]:
    """Mean confidence of the detections in a region; None when it is empty."""
    if not dets_in_region:
        return None
    return sum(score(d) for d in dets_in_region) / len(dets_in_region)


def _rank_regions(conf: Sequence[Optional[float]], k: int) -> tuple[int, ...]:
    live = [(c, i) for i, c in enumerate(conf) if c is not None]
    live.sort(key=lambda t: (-t[0], t[1]))
    return tuple(sorted(i for _, i in live[:k]))


def make_mask(regions: Sequence[Rect], selected: Sequence[int], width: int, height: int) -> np.ndarray:
    mask = np.ones((height, width), dtype=np.uint8)
    for i in selected:
        x0, y0, x1, y1 = regions[i]
        mask[y0:y1, x0:x1] = 0
    return mask


def plan_mix(target_dets: Sequence[Detection], strategy: MixStrategy | str, width: int, height: int,
             rng: Optional[np.random.Generator] = None, score: Score = by_det) -> MixPlan:
    """Pick the target region(s) to paste onto the source image.

    Grid strategies select the non-empty region with the highest mean
    confidence (two of them for ``TWO_REGION``); ties go to the lowest
    row-major index. If every region is empty the plan is flagged
    ``no_mix`` and its mask is all ones. ``CUTMIX_RANDOM`` ignores the
    detections and draws its rectangle from ``rng``.
    """
    strategy = MixStrategy(strategy)
    if strategy is MixStrategy.CUTMIX_RANDOM:
        if rng is None:
            raise ValueError("cutmix needs an rng")
        regions = tiling_around(cutmix_rect(rng, width, height), width, height)
        buckets = assign_regions(target_dets, regions, width, height)
        conf = [region_confidence(b, score) for b in buckets]
        return MixPlan(strategy, width, height, regions, conf, (0,), make_mask(regions, (0,), width, height))

    regions = strategy_regions(strategy, width, height)
    buckets = assign_regions(target_dets, regions, width, height)
    conf = [region_confidence(b, score) for b in buckets]
    selected = _rank_regions(conf, 2 if strategy is MixStrategy.TWO_REGION else 1)
    if not selected:
        return MixPlan(strategy, width, height, regions, conf, (), np.ones((height, width), dtype=np.uint8), True)
    return MixPlan(strategy, width, height, regions, conf, selected, make_mask(regions, selected, width, height))


def compose(x_s: np.ndarray, x_t: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Source pixels where ``mask`` is 1, target pixels where it is 0."""
    if x_s.shape != x_t.shape or mask.shape != x_s.shape[:2]:
        raise ValueError(f"shape mismatch: source {x_s.shape}, target {x_t.shape}, mask {mask.shape}")
    m = mask.astype(bool)
    return np.where(m[:, :, None] if x_s.ndim == 3 else m, x_s, x_t)


def _norm_rect(rect: Rect, width: int, height: int) -> tuple[float, float, float, float]:
    return (rect[0] / width, rect[1] / height, rect[2] / width, rect[3] / height)


def _cut_away(corners, center, rect):
    """Shrink ``corners`` along one axis so it no longer overlaps ``rect``.

    Only cuts that keep the box center are considered; the one keeping the
    largest area wins (ties: left, right, top, bottom).
    """
    bx0, by0, bx1, by1 = corners
    rx0, ry0, rx1, ry1 = rect
    if min(bx1, rx1) <= max(bx0, rx0) or min(by1, ry1) <= max(by0, ry0):
        return corners
    cx, cy = center
    options = []
    if cx <= rx0:
        options.append((bx0, by0, min(bx1, rx0), by1))
    if cx >= rx1:
        options.append((max(bx0, rx1), by0, bx1, by1))
    if cy <= ry0:
        options.append((bx0, by0, bx1, min(by1, ry0)))
    if cy >= ry1:
        options.append((bx0, max(by0, ry1), bx1, by1))
    if not options:  # center inside rect: nothing of the box survives on the source side
        return (bx0, by0, bx0, by0)
    return max(options, key=lambda c: (c[2] - c[0]) * (c[3] - c[1]))


def _finish(d: Detection, corners, eps: float) -> Optional[Detection]:
    x0, y0, x1, y1 = max(corners[0], 0.0), max(corners[1], 0.0), min(corners[2], 1.0), min(corners[3], 1.0)
    if x1 - x0 <= eps or y1 - y0 <= eps:
        return None
    if (x0, y0, x1, y1) == d.box.xyxy():
        return d  # untouched boxes pass through bit-exact
    return d.with_box(Box.from_xyxy(x0, y0, x1, y1))


def combine_labels(target_dets: Sequence[Detection], source_dets: Sequence[Detection], plan: MixPlan,
                   eps: float = BOX_EPS) -> list[Detection]:
    """Merged pseudo labels for the mixed image.

    Target detections centered in a selected region are clipped to that
    region; source detections centered elsewhere are cut back so they stop
    at the selected region(s). Boxes left thinner than ``eps`` are dropped.
    """
    if plan.no_mix:
        raise ValueError("a no-mix plan has no merged label set")
    w, h = plan.width, plan.height
    selected = set(plan.selected)
    out: list[Detection] = []

    for region, bucket in enumerate(assign_regions(target_dets, plan.regions, w, h)):
        if region not in selected:
            continue
        rx0, ry0, rx1, ry1 = _norm_rect(plan.regions[region], w, h)
        for d in bucket:
            bx0, by0, bx1, by1 = d.box.xyxy()
            kept = _finish(d, (max(bx0, rx0), max(by0, ry0), min(bx1, rx1), min(by1, ry1)), eps)
            if kept is not None:
                out.append(kept)

    cut_rects = [_norm_rect(plan.regions[i], w, h) for i in plan.selected]
    for region, bucket in enumerate(assign_regions(source_dets, plan.regions, w, h)):
        if region in selected:
            continue
        for d in bucket:
            corners = d.box.xyxy()
            for rect in cut_rects:
                corners = _cut_away(corners, (d.box.cx, d.box.cy), rect)
            kept = _finish(d, corners, eps)
            if kept is not None:
                out.append(kept)
    return out
