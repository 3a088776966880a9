"""Training objectives.

Each vision-language loss returns ``(value, grad)`` where ``grad`` is the
gradient of the value with respect to the similarity matrix. An empty
positive set gives ``(0.0, zeros)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NumericError, log_softmax, sigmoid, softmax_rows, softplus

SMOOTH_L1_BETA = 1.0


@dataclass(frozen=True)
class LossWeights:
    lambda_cont: float = 0.5
    lambda_aux: float = 0.8

    def __post_init__(self):
        for name in ("lambda_cont", "lambda_aux"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    l_det: float
    l_cont: float
    l_aux: float
    l_total: float
    n_positives: int = 0


def _check(sim: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sim = np.asarray(sim, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if sim.ndim != 2 or labels.shape != (sim.shape[0],):
        raise ValueError("sim must be [N, C] with one label per row")
    if labels.size and (labels.min() < 0 or labels.max() >= sim.shape[1]):
        raise ValueError("label out of range")
    return sim, labels


def loss_i2t(sim, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of each sample against its class, softmax over classes."""
    sim, labels = _check(sim, labels)
    n = sim.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(sim)
    rows = np.arange(n)
    logp = log_softmax(sim, axis=1)
    value = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(value), grad / n


def loss_t2i(sim, labels) -> tuple[float, np.ndarray]:
    """Each sample against the other samples in its class column.

    For sample ``i`` the softmax runs over the batch rows of column
    ``labels[i]``; classes that label no sample contribute nothing.
    """
    sim, labels = _check(sim, labels)
    n = sim.shape[0]
    grad = np.zeros_like(sim)
    if n == 0:
        return 0.0, grad
    logp_col = log_softmax(sim, axis=0)
    rows = np.arange(n)
    value = -logp_col[rows, labels].mean()
    p_col = np.exp(logp_col)
    counts = np.bincount(labels, minlength=sim.shape[1])
    # every anchor of class c adds the full column softmax once
    grad += p_col * counts[None, :]
    grad[rows, labels] -= 1.0
    return float(value), grad / n


def loss_contrastive(sim, labels) -> tuple[float, np.ndarray]:
    """Symmetric InfoNCE, the mean of the two directions (nonnegative)."""
    a, ga = loss_i2t(sim, labels)
    b, gb = loss_t2i(sim, labels)
    return 0.5 * (a + b), 0.5 * (ga + gb)


def loss_aux(sim, labels) -> tuple[float, np.ndarray]:
    """Auxiliary cross-entropy over the similarity logits."""
    return loss_i2t(sim, labels)


def loss_total(l_det: float, l_cont: float, l_aux: float,
               weights: LossWeights, n_positives: int = 0) -> LossBreakdown:
    parts = {"l_det": l_det, "l_cont": l_cont, "l_aux": l_aux}
    for name, v in parts.items():
        if not np.isfinite(v):
            raise NumericError(f"non-finite loss term {name}")
    total = l_det + weights.lambda_cont * l_cont + weights.lambda_aux * l_aux
    return LossBreakdown(l_det, l_cont, l_aux, total, n_positives)


@dataclass
class DetectionTargets:
    """Per-cell targets for one batch of grid cells."""

    positive: np.ndarray  # bool [M]
    classes: np.ndarray  # int [M], meaningful where positive
    offsets: np.ndarray  # [M, 4], meaningful where positive


@dataclass
class DetectionLoss:
    total: float
    objectness: float
    classification: float
    box: float
    d_obj: np.ndarray
    d_cls: np.ndarray
    d_box: np.ndarray


def smooth_l1(x: np.ndarray, beta: float = SMOOTH_L1_BETA) -> tuple[np.ndarray, np.ndarray]:
    ax = np.abs(x)
    small = ax < beta
    val = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    grad = np.where(small, x / beta, np.sign(x))
    return val, grad


def loss_detection(obj_logits: np.ndarray, cls_logits: np.ndarray, box_offsets: np.ndarray,
                   targets: DetectionTargets) -> DetectionLoss:
    """BCE objectness over all cells + CE and smooth-L1 over positive cells.

    Each term is averaged over its own support. Gradients are returned for
    the three head outputs.
    """
    for a in (obj_logits, cls_logits, box_offsets):
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite detector prediction")
    m = obj_logits.shape[0]
    pos = targets.positive
    t = pos.astype(np.float64)
    # BCE with logits: softplus(x) - t*x
    obj = float(np.mean(softplus(obj_logits) - t * obj_logits))
    d_obj = (sigmoid(obj_logits) - t) / m

    d_cls = np.zeros_like(cls_logits)
    d_box = np.zeros_like(box_offsets)
    n_pos = int(pos.sum())
    cls = box = 0.0
    if n_pos:
        idx = np.flatnonzero(pos)
        y = targets.classes[idx]
        logp = log_softmax(cls_logits[idx], axis=1)
        cls = float(-logp[np.arange(n_pos), y].mean())
        g = softmax_rows(cls_logits[idx])
        g[np.arange(n_pos), y] -= 1.0
        d_cls[idx] = g / n_pos

        diff = box_offsets[idx] - targets.offsets[idx]
        val, g_box = smooth_l1(diff)
        box = float(val.sum(axis=1).mean())
        d_box[idx] = g_box / n_pos
    return DetectionLoss(obj + cls + box, obj, cls, box, d_obj, d_cls, d_box)
