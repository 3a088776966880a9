"""Boxes, IoU, class-wise greedy NMS and IoU-based anchor assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class GeometryError(ValueError):
    pass


class Box(NamedTuple):
    """Axis-aligned box in corner form on the virtual canvas."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def validate(self) -> "Box":
        if not all(math.isfinite(c) for c in self):
            raise GeometryError(f"non-finite box {tuple(self)}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise GeometryError(f"invalid box {tuple(self)}")
        return self

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)

    @property
    def size(self) -> tuple[float, float]:
        return self.x_max - self.x_min, self.y_max - self.y_min


@dataclass
class Detection:
    box: Box
    class_id: int
    score: float
    per_class_scores: np.ndarray | None = None


@dataclass
class Assignment:
    anchor_index: int
    matched_gt: int | None
    iou: float
    is_positive: bool
    forced: bool = False


def iou(a: Box, b: Box) -> float:
    a = Box(*a).validate()
    b = Box(*b).validate()
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box arrays of shape [N,4] and [M,4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    return out


def _score_order(scores: Sequence[float]) -> list[int]:
    # descending score, ties to the lower index
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Class-wise greedy NMS; result sorted by score descending."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    if not dets:
        return []
    scores = [d.score for d in dets]
    if not all(math.isfinite(s) for s in scores):
        raise ValueError("non-finite detection score")
    order = _score_order(scores)
    boxes = np.array([dets[i].box for i in order], dtype=np.float64)
    classes = np.array([dets[i].class_id for i in order])
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for r in range(len(order)):
        if suppressed[r]:
            continue
        keep.append(order[r])
        later = np.arange(r + 1, len(order))
        hit = (classes[later] == classes[r]) & (ious[r, later] > iou_threshold)
        suppressed[later[hit]] = True
    return [dets[i] for i in keep]


def assign_positives(
    anchors: Sequence[Box] | np.ndarray,
    gts: Sequence[tuple[Box, int]],
    threshold: float = 0.5,
    force_best_match: bool = False,
) -> list[Assignment]:
    """Label each anchor positive when its best IoU with any gt reaches ``threshold``.

    With ``force_best_match`` every gt additionally claims its single best
    anchor (ties to the lower anchor index), flagged as forced.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    anchor_arr = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    n = len(anchor_arr)
    if not gts:
        return [Assignment(i, None, 0.0, False) for i in range(n)]
    gt_arr = np.array([g[0] for g in gts], dtype=np.float64)
    ious = iou_matrix(anchor_arr, gt_arr)
    best_gt = ious.argmax(axis=1)  # argmax keeps the first max, i.e. lowest gt index
    best_iou = ious[np.arange(n), best_gt]
    out = []
    for i in range(n):
        pos = bool(best_iou[i] >= threshold)
        out.append(Assignment(i, int(best_gt[i]) if pos else None, float(best_iou[i]), pos))
    if force_best_match:
        for g in range(len(gts)):
            a = int(ious[:, g].argmax())
            if ious[a, g] <= 0.0 or out[a].is_positive:
                continue
            out[a] = Assignment(a, g, float(ious[a, g]), True, forced=True)
    return out
