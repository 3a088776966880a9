"""Desk-scale one-stage grid detector and its synthetic scene generator.

A scene is an ``H x W`` grid of cells on a square canvas. Each cell carries a
raw feature vector; objects write a class signature (scaled by how much of
the cell they cover) plus a geometry code describing the object's box
relative to that cell. The detector maps each cell's raw vector through a
shared two-layer backbone to a feature ``f`` consumed by the objectness,
class and box heads and, unchanged, by the vision-language branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .geometry import Box, Detection, assign_positives, iou, nms
from .losses import DetectionTargets
from .numerics import ParamTensor, affine, affine_backward, relu, relu_backward, sigmoid

GEOMETRY_CHANNELS = 4
# geometry code amplitude relative to the unit-norm class signatures
GEOMETRY_GAIN = 4.0
PLACEMENT_RETRIES = 200
MAX_OBJECT_IOU = 0.5
MIN_SIDE_CELLS, MAX_SIDE_CELLS = 0.75, 2.5


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    canvas_side: int = 128
    grid: int = 8
    raw_dim: int = 16
    num_classes: int = 8
    objects_min: int = 1
    objects_max: int = 4
    noise_sigma: float = 0.3
    signature_overlap: float = 0.4
    signature_seed: int = 0

    def __post_init__(self):
        if self.grid < 1 or self.canvas_side % self.grid:
            raise ValueError("canvas_side must be divisible by grid")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.signature_overlap <= 1.0:
            raise ValueError("signature_overlap must lie in [0, 1]")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ValueError("need 1 <= objects_min <= objects_max")
        if self.num_classes + 1 > self.signature_dim:
            raise ValueError(
                f"signature_dim {self.signature_dim} too small for {self.num_classes} classes")

    @property
    def cell(self) -> float:
        return self.canvas_side / self.grid

    @property
    def num_cells(self) -> int:
        return self.grid * self.grid

    @property
    def signature_dim(self) -> int:
        return self.raw_dim - GEOMETRY_CHANNELS


@dataclass
class SyntheticScene:
    raw: np.ndarray  # [H*W, D_raw]
    gts: list[tuple[Box, int]]
    scene_id: int = 0


def class_signatures(config: SceneConfig) -> np.ndarray:
    """Unit class signatures with pairwise cosine exactly ``signature_overlap``.

    Built as ``sqrt(r) u + sqrt(1 - r) e_c`` from orthonormal ``u, e_0..e_{C-1}``.
    """
    rng = np.random.default_rng(config.signature_seed)
    q, _ = np.linalg.qr(rng.standard_normal((config.signature_dim, config.num_classes + 1)))
    u, e = q[:, 0], q[:, 1:].T
    r = config.signature_overlap
    return np.sqrt(r) * u[None, :] + np.sqrt(1.0 - r) * e


def anchor_for_cell(cell_index: int, config: SceneConfig) -> Box:
    if not 0 <= cell_index < config.num_cells:
        raise IndexError(cell_index)
    row, col = divmod(cell_index, config.grid)
    c = config.cell
    return Box(col * c, row * c, (col + 1) * c, (row + 1) * c)


@lru_cache(maxsize=16)
def anchors(config: SceneConfig) -> np.ndarray:
    """All cell anchors, row-major, as a read-only ``[H*W, 4]`` array."""
    a = np.array([anchor_for_cell(i, config) for i in range(config.num_cells)], dtype=np.float64)
    a.flags.writeable = False
    return a


def encode_box(box: Box, anchor: Box, config: SceneConfig) -> np.ndarray:
    (cx, cy), (w, h) = box.center, box.size
    (ax, ay) = anchor.center
    c = config.cell
    return np.array([(cx - ax) / c, (cy - ay) / c, np.log(w / c), np.log(h / c)])


def decode_offsets(offsets: np.ndarray, anchor_boxes: np.ndarray, config: SceneConfig) -> np.ndarray:
    """Vectorised inverse of :func:`encode_box`, clipped to the canvas."""
    c = config.cell
    acx = 0.5 * (anchor_boxes[:, 0] + anchor_boxes[:, 2])
    acy = 0.5 * (anchor_boxes[:, 1] + anchor_boxes[:, 3])
    cx = acx + offsets[:, 0] * c
    cy = acy + offsets[:, 1] * c
    # beyond twice the canvas a box is clipped to the canvas anyway; capping
    # the exponent keeps diverged predictions from overflowing to inf
    cap = np.log(2.0 * config.canvas_side / c)
    w = c * np.exp(np.minimum(offsets[:, 2], cap))
    h = c * np.exp(np.minimum(offsets[:, 3], cap))
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    return np.clip(boxes, 0.0, float(config.canvas_side))


def _coverage(box: Box, config: SceneConfig) -> np.ndarray:
    """Fraction of each cell's area inside ``box``."""
    a = anchors(config)
    iw = np.clip(np.minimum(a[:, 2], box.x_max) - np.maximum(a[:, 0], box.x_min), 0, None)
    ih = np.clip(np.minimum(a[:, 3], box.y_max) - np.maximum(a[:, 1], box.y_min), 0, None)
    return iw * ih / config.cell**2


def _center_cell(box: Box, config: SceneConfig) -> int:
    cx, cy = box.center
    col = min(int(cx // config.cell), config.grid - 1)
    row = min(int(cy // config.cell), config.grid - 1)
    return row * config.grid + col


def _covered_cells(box: Box, config: SceneConfig) -> np.ndarray:
    a = anchors(config)
    acx = 0.5 * (a[:, 0] + a[:, 2])
    acy = 0.5 * (a[:, 1] + a[:, 3])
    hit = (acx >= box.x_min) & (acx <= box.x_max) & (acy >= box.y_min) & (acy <= box.y_max)
    # small boxes may straddle cell centres; the cell holding the box centre always sees it
    hit[_center_cell(box, config)] = True
    return np.flatnonzero(hit)


def _random_box(rng: np.random.Generator, config: SceneConfig) -> Box:
    S, c = float(config.canvas_side), config.cell
    w, h = rng.uniform(MIN_SIDE_CELLS * c, MAX_SIDE_CELLS * c, size=2)
    cx, cy = rng.uniform(0.0, S, size=2)
    return Box(max(cx - w / 2, 0.0), max(cy - h / 2, 0.0), min(cx + w / 2, S), min(cy + h / 2, S))


def generate_scene(config: SceneConfig, seed, scene_id: int = 0,
                   signatures: np.ndarray | None = None) -> SyntheticScene:
    """Deterministic scene for ``(config, seed)``; ``seed`` may be an int or int sequence."""
    rng = np.random.default_rng(seed)
    sigs = class_signatures(config) if signatures is None else signatures
    k = int(rng.integers(config.objects_min, config.objects_max + 1))
    gts: list[tuple[Box, int]] = []
    used_cells: set[int] = set()
    for _ in range(k):
        for _attempt in range(PLACEMENT_RETRIES):
            box = _random_box(rng, config)
            cell = _center_cell(box, config)
            if cell in used_cells or any(iou(box, g) > MAX_OBJECT_IOU for g, _ in gts):
                continue
            break
        else:
            raise GenerationError(f"could not place {k} objects after {PLACEMENT_RETRIES} retries")
        used_cells.add(cell)
        gts.append((box, int(rng.integers(config.num_classes))))

    raw = np.zeros((config.num_cells, config.raw_dim))
    owner_cov = np.zeros(config.num_cells)
    a = anchors(config)
    D = config.signature_dim
    for box, cls in gts:
        cov = _coverage(box, config)
        for i in _covered_cells(box, config):
            raw[i, :D] += cov[i] * sigs[cls]
            # geometry code comes from the object covering the cell most
            if cov[i] > owner_cov[i]:
                owner_cov[i] = cov[i]
                raw[i, D:] = GEOMETRY_GAIN * encode_box(box, Box(*a[i]), config)
    if config.noise_sigma > 0:
        raw += rng.normal(0.0, config.noise_sigma, raw.shape)
    return SyntheticScene(raw, gts, scene_id)


def generate_dataset(config: SceneConfig, seed: int, count: int, split: int = 0) -> list[SyntheticScene]:
    sigs = class_signatures(config)
    return [generate_scene(config, [seed, split, i], scene_id=i, signatures=sigs) for i in range(count)]


BACKBONE_HIDDEN = 64
FEATURE_DIM = 64


@dataclass
class DetectorParams:
    bb_W1: ParamTensor
    bb_b1: ParamTensor
    bb_W2: ParamTensor
    bb_b2: ParamTensor
    obj_W: ParamTensor
    obj_b: ParamTensor
    cls_W: ParamTensor
    cls_b: ParamTensor
    box_W: ParamTensor
    box_b: ParamTensor

    @classmethod
    def init(cls, raw_dim: int, num_classes: int, rng: np.random.Generator,
             hidden: int = BACKBONE_HIDDEN, feat_dim: int = FEATURE_DIM) -> "DetectorParams":
        def he(name, fan_in, fan_out):
            return ParamTensor(name, rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))

        def small(name, fan_in, fan_out):
            return ParamTensor(name, rng.normal(0.0, 0.01, (fan_in, fan_out)))

        def zeros(name, n):
            return ParamTensor(name, np.zeros(n))

        return cls(
            bb_W1=he("backbone.W1", raw_dim, hidden), bb_b1=zeros("backbone.b1", hidden),
            bb_W2=he("backbone.W2", hidden, feat_dim), bb_b2=zeros("backbone.b2", feat_dim),
            obj_W=small("head.obj.W", feat_dim, 1), obj_b=zeros("head.obj.b", 1),
            cls_W=small("head.cls.W", feat_dim, num_classes), cls_b=zeros("head.cls.b", num_classes),
            box_W=small("head.box.W", feat_dim, 4), box_b=zeros("head.box.b", 4),
        )

    def backbone(self) -> list[ParamTensor]:
        return [self.bb_W1, self.bb_b1, self.bb_W2, self.bb_b2]

    def heads(self) -> list[ParamTensor]:
        return [self.obj_W, self.obj_b, self.cls_W, self.cls_b, self.box_W, self.box_b]

    def tensors(self) -> list[ParamTensor]:
        return self.backbone() + self.heads()

    @property
    def feat_dim(self) -> int:
        return self.bb_W2.shape[1]


@dataclass
class GridPrediction:
    f: np.ndarray
    obj_logits: np.ndarray
    cls_logits: np.ndarray
    box_offsets: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)


def detector_forward(raw: np.ndarray, params: DetectorParams) -> GridPrediction:
    """Forward any stack of cells ``raw[M, D_raw]``."""
    h1_pre = affine(raw, params.bb_W1.value, params.bb_b1.value)
    h1 = relu(h1_pre)
    f_pre = affine(h1, params.bb_W2.value, params.bb_b2.value)
    f = relu(f_pre)
    obj = affine(f, params.obj_W.value, params.obj_b.value)[:, 0]
    cls = affine(f, params.cls_W.value, params.cls_b.value)
    box = affine(f, params.box_W.value, params.box_b.value)
    cache = {"raw": raw, "h1_pre": h1_pre, "h1": h1, "f_pre": f_pre}
    return GridPrediction(f, obj, cls, box, cache)


def detector_backward(pred: GridPrediction, params: DetectorParams, d_obj: np.ndarray,
                      d_cls: np.ndarray, d_box: np.ndarray, d_f_extra: np.ndarray | None = None) -> None:
    """Accumulate detector grads from head-output grads plus any extra grad on ``f``."""
    c = pred._cache
    f = pred.f
    df, dW, db = affine_backward(d_obj[:, None], f, params.obj_W.value)
    params.obj_W.grad += dW
    params.obj_b.grad += db
    g, dW, db = affine_backward(d_cls, f, params.cls_W.value)
    params.cls_W.grad += dW
    params.cls_b.grad += db
    df = df + g
    g, dW, db = affine_backward(d_box, f, params.box_W.value)
    params.box_W.grad += dW
    params.box_b.grad += db
    df = df + g
    if d_f_extra is not None:
        df = df + d_f_extra
    d_fpre = relu_backward(df, c["f_pre"])
    dh1, dW, db = affine_backward(d_fpre, c["h1"], params.bb_W2.value)
    params.bb_W2.grad += dW
    params.bb_b2.grad += db
    d_h1pre = relu_backward(dh1, c["h1_pre"])
    _, dW, db = affine_backward(d_h1pre, c["raw"], params.bb_W1.value)
    params.bb_W1.grad += dW
    params.bb_b1.grad += db


def decode_detections(pred: GridPrediction, p_fused: np.ndarray, obj_threshold: float,
                      config: SceneConfig, nms_iou: float = 0.5) -> list[Detection]:
    """Threshold objectness, decode boxes, score by ``sigmoid(obj) * p_fused``, then NMS."""
    obj = sigmoid(pred.obj_logits)
    keep = np.flatnonzero(obj >= obj_threshold)
    if keep.size == 0:
        return []
    boxes = decode_offsets(pred.box_offsets[keep], anchors(config)[keep], config)
    scores = obj[keep, None] * p_fused[keep]
    dets = []
    for row, cell in enumerate(keep):
        c = int(np.argmax(scores[row]))
        dets.append(Detection(Box(*boxes[row]), c, float(scores[row, c]), scores[row].copy()))
    return nms(dets, nms_iou)


def scene_targets(scenes: Sequence[SyntheticScene], config: SceneConfig, threshold: float,
                  force_best_match: bool):
    """Stacked per-cell (positive, class, offsets) over a list of scenes."""
    a = anchors(config)
    pos, cls, off = [], [], []
    for sc in scenes:
        asg = assign_positives(a, sc.gts, threshold, force_best_match)
        p = np.zeros(len(a), dtype=bool)
        y = np.zeros(len(a), dtype=np.int64)
        o = np.zeros((len(a), 4))
        for s in asg:
            if s.is_positive:
                box, c = sc.gts[s.matched_gt]
                p[s.anchor_index] = True
                y[s.anchor_index] = c
                o[s.anchor_index] = encode_box(box, Box(*a[s.anchor_index]), config)
        pos.append(p)
        cls.append(y)
        off.append(o)
    return DetectionTargets(np.concatenate(pos), np.concatenate(cls), np.concatenate(off))
