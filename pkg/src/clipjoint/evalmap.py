"""Greedy detection matching, all-point interpolated AP, mAP@0.5 and mAP@[.5:.95].

Datasets are passed as per-image lists: ``dets[k]`` are the detections of
image ``k`` and ``gts[k]`` its ``(Box, class_id)`` ground truths.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box, Detection, iou

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


class UndefinedMetricError(ValueError):
    pass


@dataclass
class MatchResult:
    """Detections in evaluation order with their TP/FP verdicts.

    Order is by score descending; ties keep image order and then the
    original detection index.
    """

    scores: np.ndarray
    classes: np.ndarray
    is_tp: np.ndarray
    matched_gt: list[int | None]
    gt_counts: Counter = field(default_factory=Counter)


def match_detections(dets: Sequence[Detection], gts: Sequence[tuple[Box, int]],
                     iou_thresh: float = 0.5) -> MatchResult:
    """Match one image's detections to its ground truths, class by class."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken: set[int] = set()
    is_tp, matched = [], []
    for i in order:
        d = dets[i]
        best, best_iou = None, iou_thresh
        for g, (box, cls) in enumerate(gts):
            if cls != d.class_id or g in taken:
                continue
            o = iou(d.box, box)
            if o >= best_iou and (best is None or o > best_iou):
                best, best_iou = g, o
        if best is not None:
            taken.add(best)
        is_tp.append(best is not None)
        matched.append(best)
    return MatchResult(
        scores=np.array([dets[i].score for i in order], dtype=np.float64),
        classes=np.array([dets[i].class_id for i in order], dtype=np.int64),
        is_tp=np.array(is_tp, dtype=bool),
        matched_gt=matched,
        gt_counts=Counter(int(c) for _, c in gts),
    )


def merge_matches(results: Sequence[MatchResult]) -> MatchResult:
    """Concatenate per-image results into one dataset-level result."""
    if not results:
        return MatchResult(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool), [])
    scores = np.concatenate([r.scores for r in results])
    # stable sort keeps image order, then per-image order, among equal scores
    order = np.argsort(-scores, kind="stable")
    classes = np.concatenate([r.classes for r in results])
    is_tp = np.concatenate([r.is_tp for r in results])
    matched = [m for r in results for m in r.matched_gt]
    counts: Counter = Counter()
    for r in results:
        counts.update(r.gt_counts)
    return MatchResult(scores[order], classes[order], is_tp[order], [matched[i] for i in order], counts)


def pr_curve(is_tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(is_tp, dtype=np.float64)
    fp = np.cumsum(~is_tp, dtype=np.float64)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).tiny)
    return recall, precision


def average_precision(match: MatchResult, class_id: int) -> float | None:
    """All-point interpolated AP for one class; ``None`` when the class has no gts."""
    n_gt = match.gt_counts.get(class_id, 0)
    if n_gt == 0:
        return None
    sel = match.classes == class_id
    if not sel.any():
        return 0.0
    recall, precision = pr_curve(match.is_tp[sel], n_gt)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def _dataset_match(dets, gts, iou_thresh) -> MatchResult:
    if len(dets) != len(gts):
        raise ValueError("dets and gts must cover the same images")
    return merge_matches([match_detections(d, g, iou_thresh) for d, g in zip(dets, gts)])


def per_class_ap(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[tuple[Box, int]]],
                 iou_thresh: float = 0.5) -> dict[int, float]:
    match = _dataset_match(dets, gts, iou_thresh)
    out = {}
    for c in sorted(match.gt_counts):
        ap = average_precision(match, c)
        if ap is not None:
            out[c] = ap
    return out


def map_at_threshold(dets, gts, iou_thresh: float = 0.5) -> float:
    aps = per_class_ap(dets, gts, iou_thresh)
    if not aps:
        raise UndefinedMetricError("no class has any ground truth")
    return float(np.mean(list(aps.values())))


def coco_style_map(dets, gts) -> float:
    return float(np.mean([map_at_threshold(dets, gts, t) for t in COCO_THRESHOLDS]))


def evaluate(dets, gts) -> dict:
    """Summary dict with ``map50``, ``map5095`` and the per-class AP@0.5 table."""
    table = per_class_ap(dets, gts, 0.5)
    if not table:
        raise UndefinedMetricError("no class has any ground truth")
    return {
        "map50": float(np.mean(list(table.values()))),
        "map5095": coco_style_map(dets, gts),
        "per_class_ap": {str(c): ap for c, ap in table.items()},
    }
