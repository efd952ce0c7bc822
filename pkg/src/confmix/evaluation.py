"""Per-class average precision at IoU 0.5 and TP/FP/FN overlays."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detection import Box, Detection, Score, by_det, iou


@dataclass
class MatchResult:
    order: list[int]          # detection indices, descending score
    scores: list[float]       # aligned with order
    tp: list[bool]            # aligned with order
    det_gt: list[int]         # matched gt index per sorted detection, -1 for FP
    gt_matched: list[bool]    # per ground-truth box


def match_detections(dets: Sequence[Detection], gts: Sequence[tuple[Box, int]], iou_thresh: float = 0.5,
                     score: Score = by_det) -> MatchResult:
    """Greedy matching in descending score order (ties by input position).

    Each detection takes the highest-IoU still-unmatched ground truth of its
    class with IoU >= ``iou_thresh``; otherwise it is a false positive.
    """
    order = sorted(range(len(dets)), key=lambda i: (-score(dets[i]), i))
    gt_matched = [False] * len(gts)
    tp, det_gt = [], []
    for i in order:
        d = dets[i]
        best, best_iou = -1, iou_thresh
        for j, (gbox, gcls) in enumerate(gts):
            if gt_matched[j] or gcls != d.class_id:
                continue
            ov = iou(d.box, gbox)
            if ov >= best_iou and (best < 0 or ov > best_iou):
                best, best_iou = j, ov
        if best >= 0:
            gt_matched[best] = True
        tp.append(best >= 0)
        det_gt.append(best)
    return MatchResult(order, [score(dets[i]) for i in order], tp, det_gt, gt_matched)


def average_precision(flags: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated AP of a ranked list of TP flags."""
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def mean_ap(per_class: dict[int, float] | Sequence[float]) -> float:
    values = list(per_class.values()) if isinstance(per_class, dict) else list(per_class)
    if not values:
        raise ValueError("no classes to average")
    return float(np.mean(values))


@dataclass
class APResult:
    ap: dict[int, float]
    n_gt: dict[int, int]
    mAP: float
    ranked: dict[int, list[tuple[float, bool]]] = field(default_factory=dict, repr=False)

    def table(self, class_names: Sequence[str] = ()) -> str:
        lines = ["class\tn_gt\tAP"]
        for c in sorted(self.ap):
            name = class_names[c] if c < len(class_names) else str(c)
            lines.append(f"{name}\t{self.n_gt[c]}\t{self.ap[c]:.4f}")
        lines.append(f"mAP\t{sum(self.n_gt.values())}\t{self.mAP:.4f}")
        return "\n".join(lines)


def evaluate_detections(per_image_dets: Sequence[Sequence[Detection]],
                        per_image_gts: Sequence[Sequence[tuple[Box, int]]],
                        iou_thresh: float = 0.5, score: Score = by_det) -> APResult:
    """Dataset-level AP per class present in the ground truth, and their mean."""
    if len(per_image_dets) != len(per_image_gts):
        raise ValueError("detections and ground truth cover different image counts")
    ranked: dict[int, list[tuple[float, int, int, bool]]] = {}
    n_gt: dict[int, int] = {}
    for img, (dets, gts) in enumerate(zip(per_image_dets, per_image_gts)):
        for _, c in gts:
            n_gt[c] = n_gt.get(c, 0) + 1
        res = match_detections(dets, gts, iou_thresh, score)
        for rank, (i, s, hit) in enumerate(zip(res.order, res.scores, res.tp)):
            ranked.setdefault(dets[i].class_id, []).append((s, img, rank, hit))

    ap = {}
    flat = {}
    for c in sorted(n_gt):
        entries = sorted(ranked.get(c, []), key=lambda e: (-e[0], e[1], e[2]))
        flat[c] = [(e[0], e[3]) for e in entries]
        ap[c] = average_precision([e[3] for e in entries], n_gt[c])
    if not ap:
        raise ValueError("no ground-truth objects to evaluate against")
    return APResult(ap, n_gt, mean_ap(ap), flat)


def overlay_roles(dets: Sequence[Detection], gts: Sequence[tuple[Box, int]], iou_thresh: float = 0.5,
                  score: Score = by_det) -> list[dict]:
    """TP/FP detections and FN ground truths of one image as plain records."""
    res = match_detections(dets, gts, iou_thresh, score)
    rows = []
    for i, s, hit in zip(res.order, res.scores, res.tp):
        d = dets[i]
        rows.append({"role": "TP" if hit else "FP", "class": d.class_id, "score": round(s, 6),
                     "box": [round(v, 6) for v in d.box.as_tuple()]})
    for (b, c), hit in zip(gts, res.gt_matched):
        if not hit:
            rows.append({"role": "FN", "class": c, "box": [round(v, 6) for v in b.as_tuple()]})
    return rows
