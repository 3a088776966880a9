"""Joint training of the nano-detector and the vision-language branch."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .evalmap import evaluate
from .geometry import Detection, iou_matrix
from .losses import (
    DetectionTargets,
    LossBreakdown,
    LossWeights,
    loss_aux,
    loss_contrastive,
    loss_detection,
    loss_total,
)
from .nanodet import (
    DetectorParams,
    SceneConfig,
    SyntheticScene,
    class_signatures,
    anchors,
    decode_detections,
    decode_offsets,
    detector_backward,
    detector_forward,
    generate_dataset,
    generate_scene,
    scene_targets,
)
from .numerics import NumericError, ParamTensor, finite_diff_check, softmax_rows
from .vlhead import (
    ProjectionHeadParams,
    TemperatureVector,
    TextEmbeddingTable,
    VLHeadConfig,
    clip_probs,
    fuse_scores,
    init_text_embeddings,
    similarity,
    similarity_backward,
    visual_embed,
    visual_embed_backward,
)

log = logging.getLogger(__name__)

GROUPS = ("backbone", "heads", "projection", "text_embeddings", "temperatures")
GRADCHECK_TOL = 1e-4
RESOLUTION_FLOOR = 1e-5
VL_GATES = ("anchor", "predicted", "union")


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    lr: float = 0.005
    lr_scale: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_step_epochs: int = 3
    gamma: float = 0.1
    lambda_cont: float = 0.5
    lambda_aux: float = 0.8
    alpha: float = 0.7
    iou_positive: float = 0.5
    seed: int = 0
    eval_every: int = 1
    n_train: int = 800
    n_val: int = 200
    obj_threshold: float = 0.05
    freeze_vl: bool = False
    temperature_lr_mult: float = 0.01
    vl_gate: str = "union"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 < self.iou_positive < 1.0:
            raise ValueError("iou_positive must lie in (0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.lr_step_epochs < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr_step_epochs >= 1 required")
        if self.vl_gate not in VL_GATES:
            raise ValueError(f"vl_gate must be one of {VL_GATES}")
        if self.temperature_lr_mult < 0:
            raise ValueError("temperature_lr_mult must be >= 0")
        LossWeights(self.lambda_cont, self.lambda_aux)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cont, self.lambda_aux)

    @property
    def mode(self) -> str:
        return "ce-baseline" if self.lambda_cont == 0 and self.lambda_aux == 0 else "joint"

    def lr_at(self, epoch: int) -> float:
        """StepLR: decay by ``gamma`` every ``lr_step_epochs`` (epoch is 0-based)."""
        return self.lr * self.lr_scale * self.gamma ** (epoch // self.lr_step_epochs)


def toy_train_config(**overrides) -> TrainConfig:
    """Defaults used for the desk-scale synthetic world."""
    base = dict(epochs=15, batch_size=16, lr_scale=4.0, lr_step_epochs=10)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class Model:
    detector: DetectorParams
    projection: ProjectionHeadParams | None = None
    text: TextEmbeddingTable | None = None
    temps: TemperatureVector | None = None

    @classmethod
    def init(cls, scene: SceneConfig, seed: int, vl_branch: bool = True,
             vl: VLHeadConfig | None = None) -> "Model":
        vl = vl or VLHeadConfig()
        # independent streams so the detector init does not depend on the branch
        det = DetectorParams.init(scene.raw_dim, scene.num_classes, np.random.default_rng([seed, 1]))
        if not vl_branch:
            return cls(det)
        proj = ProjectionHeadParams.init(det.feat_dim, np.random.default_rng([seed, 2]),
                                         hidden=vl.hidden_dim, embed_dim=vl.embed_dim)
        text = init_text_embeddings(scene.num_classes, vl.embed_dim, seed=[seed, 3],
                                    path=vl.text_embeddings)
        return cls(det, proj, text, TemperatureVector.init(scene.num_classes, vl.tau_init))

    @property
    def has_vl(self) -> bool:
        return self.projection is not None

    def groups(self) -> dict[str, list[ParamTensor]]:
        g = {"backbone": self.detector.backbone(), "heads": self.detector.heads()}
        if self.has_vl:
            g["projection"] = self.projection.tensors()
            g["text_embeddings"] = [self.text.embeddings]
            g["temperatures"] = [self.temps.tau]
        return g

    def tensors(self) -> list[ParamTensor]:
        return [t for ts in self.groups().values() for t in ts]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()


@dataclass
class Batch:
    raw: np.ndarray
    det_targets: DetectionTargets
    vl_rows: np.ndarray
    vl_labels: np.ndarray
    gts: list = field(default_factory=list)


def make_batch(scenes: Sequence[SyntheticScene], scene_cfg: SceneConfig, iou_positive: float) -> Batch:
    raw = np.concatenate([s.raw for s in scenes], axis=0)
    det = scene_targets(scenes, scene_cfg, iou_positive, force_best_match=True)
    vl = scene_targets(scenes, scene_cfg, iou_positive, force_best_match=False)
    rows = np.flatnonzero(vl.positive)
    return Batch(raw, det, rows, vl.classes[rows], [list(s.gts) for s in scenes])


def predicted_positives(box_offsets: np.ndarray, gts: Sequence, scene_cfg: SceneConfig,
                        threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Rows whose decoded box reaches ``threshold`` IoU with a gt of their scene."""
    n = scene_cfg.num_cells
    a = anchors(scene_cfg)
    rows, labels = [], []
    for k, scene_gts in enumerate(gts):
        if not scene_gts:
            continue
        boxes = decode_offsets(box_offsets[k * n:(k + 1) * n], a, scene_cfg)
        ious = iou_matrix(boxes, np.array([g[0] for g in scene_gts]))
        best = ious.argmax(axis=1)
        hit = np.flatnonzero(ious[np.arange(n), best] >= threshold)
        rows.append(hit + k * n)
        labels.append(np.array([scene_gts[g][1] for g in best[hit]], dtype=np.int64))
    if not rows:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(rows), np.concatenate(labels)


def concat_batches(parts: Sequence[Batch]) -> Batch:
    """Stack per-scene batches, re-offsetting the positive row indices."""
    offsets = np.cumsum([0] + [len(p.raw) for p in parts[:-1]])
    return Batch(
        raw=np.concatenate([p.raw for p in parts], axis=0),
        det_targets=DetectionTargets(
            np.concatenate([p.det_targets.positive for p in parts]),
            np.concatenate([p.det_targets.classes for p in parts]),
            np.concatenate([p.det_targets.offsets for p in parts]),
        ),
        vl_rows=np.concatenate([p.vl_rows + o for p, o in zip(parts, offsets)]),
        vl_labels=np.concatenate([p.vl_labels for p in parts]),
        gts=[g for p in parts for g in p.gts],
    )


@dataclass
class StepResult:
    losses: LossBreakdown
    clip_correct: int


def gate_rows(batch: Batch, box_offsets: np.ndarray, gate: str, scene_cfg: SceneConfig,
              threshold: float) -> Batch:
    """Re-select the vision-language rows of ``batch``.

    ``anchor`` keeps the anchor-IoU rows computed by :func:`make_batch`;
    ``predicted`` uses the (detached) decoded boxes; ``union`` takes both,
    preferring the anchor label where a row appears twice.
    """
    if gate == "anchor":
        return batch
    if gate not in VL_GATES:
        raise ValueError(f"unknown vl_gate {gate!r}")
    rows, labels = predicted_positives(box_offsets, batch.gts, scene_cfg, threshold)
    if gate == "union":
        rows = np.concatenate([batch.vl_rows, rows])
        labels = np.concatenate([batch.vl_labels, labels])
        rows, first = np.unique(rows, return_index=True)
        labels = labels[first]
    return Batch(batch.raw, batch.det_targets, rows, labels, batch.gts)


def forward_backward(model: Model, batch: Batch, weights: LossWeights, backward: bool = True,
                     gate: str = "anchor", scene_cfg: SceneConfig | None = None,
                     threshold: float = 0.5) -> StepResult:
    """Evaluate the total loss on ``batch`` and, if asked, accumulate gradients.

    Returns the loss breakdown of the step; ``n_positives`` counts the rows
    the vision-language terms saw after gating.
    """
    pred = detector_forward(batch.raw, model.detector)
    batch = gate_rows(batch, pred.box_offsets, gate, scene_cfg, threshold)
    det = loss_detection(pred.obj_logits, pred.cls_logits, pred.box_offsets, batch.det_targets)
    l_cont = l_aux = 0.0
    correct = 0
    d_f = None
    n_pos = len(batch.vl_rows)
    if model.has_vl and n_pos:
        # the branch consumes the very rows the detection heads saw
        f_pos = pred.f[batch.vl_rows]
        vhat, cache = visual_embed(f_pos, model.projection)
        sim = similarity(vhat, model.text, model.temps)
        l_cont, g_cont = loss_contrastive(sim, batch.vl_labels)
        l_aux, g_aux = loss_aux(sim, batch.vl_labels)
        correct = int(np.sum(sim.argmax(axis=1) == batch.vl_labels))
        if backward:
            g_sim = weights.lambda_cont * g_cont + weights.lambda_aux * g_aux
            g_vhat = similarity_backward(g_sim, vhat, model.text, model.temps)
            g_f_pos = visual_embed_backward(g_vhat, cache, model.projection)
            d_f = np.zeros_like(pred.f)
            np.add.at(d_f, batch.vl_rows, g_f_pos)
    parts = loss_total(det.total, l_cont, l_aux, weights, n_pos)
    if backward:
        detector_backward(pred, model.detector, det.d_obj, det.d_cls, det.d_box, d_f)
    return StepResult(parts, correct)


def _check_finite(parts: LossBreakdown) -> None:
    for name in ("l_det", "l_cont", "l_aux", "l_total"):
        v = getattr(parts, name)
        if not math.isfinite(v):
            raise TrainingAborted(f"non-finite {name} = {v}")


def _decays(name: str) -> bool:
    # weight matrices only; biases, temperatures and text rows are not decayed
    return name.split(".")[-1].startswith("W")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    l_det: float
    l_cont: float
    l_aux: float
    l_total: float
    n_positives: int
    clip_top1_train: float | None
    clip_top1_val: float | None = None
    map50: float | None = None
    map5095: float | None = None


class Trainer:
    """Single-writer SGD+momentum loop over a fixed training set."""

    def __init__(self, config: TrainConfig, scene_config: SceneConfig,
                 train_scenes: Sequence[SyntheticScene], val_scenes: Sequence[SyntheticScene] = (),
                 vl_branch: bool = True, vl: VLHeadConfig | None = None):
        self.config = config
        self.scene_config = scene_config
        self.train_scenes = list(train_scenes)
        self.val_scenes = list(val_scenes)
        self.model = Model.init(scene_config, config.seed, vl_branch, vl)
        self.velocity = {t.name: np.zeros_like(t.value) for t in self.model.tensors()}
        self.step_count = 0
        self.epoch = 0
        self.history: list[EpochRecord] = []
        self._val_batch = None
        self._batch_cache: dict[int, Batch] = {}

    def _frozen(self, group: str) -> bool:
        return self.config.freeze_vl and group in ("projection", "text_embeddings", "temperatures")

    def _scene_batch(self, scene: SyntheticScene) -> Batch:
        key = id(scene)
        if key not in self._batch_cache:
            self._batch_cache[key] = make_batch([scene], self.scene_config, self.config.iou_positive)
        return self._batch_cache[key]

    def step(self, scenes: Sequence[SyntheticScene], lr: float | None = None) -> StepResult:
        lr = self.config.lr_at(self.epoch) if lr is None else lr
        batch = concat_batches([self._scene_batch(s) for s in scenes])
        self.model.zero_grad()
        try:
            res = forward_backward(self.model, batch, self.config.weights, gate=self.config.vl_gate,
                                   scene_cfg=self.scene_config, threshold=self.config.iou_positive)
            _check_finite(res.losses)
        except (NumericError, TrainingAborted) as e:
            raise TrainingAborted(f"step {self.step_count + 1} (epoch {self.epoch + 1}): {e}") from e
        mu, wd = self.config.momentum, self.config.weight_decay
        for group, tensors in self.model.groups().items():
            if self._frozen(group):
                continue
            group_lr = lr * self.config.temperature_lr_mult if group == "temperatures" else lr
            for t in tensors:
                g = t.grad + wd * t.value if _decays(t.name) else t.grad
                v = self.velocity[t.name]
                v *= mu
                v += g
                t.value -= group_lr * v
        if self.model.has_vl:
            self.model.temps.clamp()
        self.step_count += 1
        return res

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.config.seed, 7, epoch]).permutation(len(self.train_scenes))

    def train_epoch(self) -> EpochRecord:
        cfg = self.config
        lr = cfg.lr_at(self.epoch)
        order = self.epoch_order(self.epoch)
        sums = np.zeros(4)
        steps = n_pos = correct = 0
        for start in range(0, len(order), cfg.batch_size):
            scenes = [self.train_scenes[i] for i in order[start:start + cfg.batch_size]]
            res = self.step(scenes, lr)
            p = res.losses
            sums += (p.l_det, p.l_cont, p.l_aux, p.l_total)
            steps += 1
            n_pos += p.n_positives
            correct += res.clip_correct
        means = sums / max(steps, 1)
        rec = EpochRecord(
            epoch=self.epoch + 1, lr=lr,
            l_det=float(means[0]), l_cont=float(means[1]), l_aux=float(means[2]), l_total=float(means[3]),
            n_positives=n_pos,
            clip_top1_train=correct / n_pos if self.model.has_vl and n_pos else None,
        )
        self.epoch += 1
        if self.val_scenes and (self.epoch % cfg.eval_every == 0 or self.epoch == cfg.epochs):
            try:
                rec.clip_top1_val, rec.map50, rec.map5095 = self.validate()
            except NumericError as e:
                raise TrainingAborted(f"validation after epoch {self.epoch}: {e}") from e
        self.history.append(rec)
        log.info("epoch %d: %s", rec.epoch, asdict(rec))
        return rec

    def validate(self):
        if self._val_batch is None:
            self._val_batch = make_batch(self.val_scenes, self.scene_config, self.config.iou_positive)
        top1 = clip_accuracy(self.model, self._val_batch, self.config.vl_gate, self.scene_config,
                             self.config.iou_positive)
        dets = predict(self.model, self.val_scenes, self.scene_config, self.config.alpha,
                       self.config.obj_threshold)
        summary = evaluate(dets, [s.gts for s in self.val_scenes])
        return top1, summary["map50"], summary["map5095"]

    def fit(self) -> list[EpochRecord]:
        while self.epoch < self.config.epochs:
            self.train_epoch()
        return self.history


def clip_accuracy(model: Model, batch: Batch, gate: str = "anchor",
                  scene_cfg: SceneConfig | None = None, threshold: float = 0.5) -> float | None:
    """Top-1 accuracy of the similarity argmax over the gated positive rows."""
    if not model.has_vl:
        return None
    pred = detector_forward(batch.raw, model.detector)
    batch = gate_rows(batch, pred.box_offsets, gate, scene_cfg, threshold)
    if len(batch.vl_rows) == 0:
        return None
    vhat, _ = visual_embed(pred.f[batch.vl_rows], model.projection)
    sim = similarity(vhat, model.text, model.temps)
    return float(np.mean(sim.argmax(axis=1) == batch.vl_labels))


def scene_probabilities(model: Model, raw: np.ndarray, alpha: float):
    """Detector forward plus fused class probabilities for every cell."""
    pred = detector_forward(raw, model.detector)
    p_ce = softmax_rows(pred.cls_logits)
    if model.has_vl:
        vhat, _ = visual_embed(pred.f, model.projection)
        p_clip = clip_probs(similarity(vhat, model.text, model.temps))
        p = fuse_scores(p_ce, p_clip, alpha)
    else:
        p = p_ce
    return pred, p


def predict(model: Model, scenes: Sequence[SyntheticScene], scene_cfg: SceneConfig,
            alpha: float = 0.7, obj_threshold: float = 0.05,
            nms_iou: float = 0.5) -> list[list[Detection]]:
    out = []
    for sc in scenes:
        pred, p = scene_probabilities(model, sc.raw, alpha)
        out.append(decode_detections(pred, p, obj_threshold, scene_cfg, nms_iou))
    return out


def train(config: TrainConfig, scene_config: SceneConfig | None = None,
          train_scenes=None, val_scenes=None, vl_branch: bool = True,
          vl: VLHeadConfig | None = None) -> Trainer:
    """Generate data if needed, run the full schedule and return the trainer."""
    scene_config = scene_config or SceneConfig()
    if train_scenes is None:
        train_scenes = generate_dataset(scene_config, config.seed, config.n_train, split=0)
    if val_scenes is None:
        val_scenes = generate_dataset(scene_config, config.seed, config.n_val, split=1)
    trainer = Trainer(config, scene_config, train_scenes, val_scenes, vl_branch, vl)
    trainer.fit()
    return trainer


@dataclass
class GradcheckReport:
    seed: int
    errors: dict[str, float]
    probes: dict[str, int]
    n_positives: int
    kinks: dict[str, int] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(e < GRADCHECK_TOL for e in self.errors.values())

    def failing(self) -> list[str]:
        return [g for g, e in self.errors.items() if not e < GRADCHECK_TOL]


def gradcheck_all(seed: int = 0, weights: LossWeights | None = None, n_scenes: int = 4,
                  min_positives: int = 4, max_entries: int = 16, eps: float = 1e-6,
                  scene_config: SceneConfig | None = None, gate: str = "union") -> GradcheckReport:
    """Central-difference check of the total loss over all five parameter groups.

    A few scenes are drawn for ``seed``, the model is initialised (with heads
    and temperatures nudged off their init values) and up to ``max_entries``
    entries of every tensor are probed. The positive rows are gated once and
    then frozen so a probe can never change which rows the branch sees.
    """
    t0 = time.perf_counter()
    scene_config = scene_config or SceneConfig()
    weights = weights or LossWeights()
    sigs = class_signatures(scene_config)
    scenes = [generate_scene(scene_config, [seed, 99, k], k, sigs) for k in range(n_scenes)]
    k = n_scenes
    # grow the batch until the vision-language terms see several positives
    while len(make_batch(scenes, scene_config, 0.5).vl_rows) < min_positives:
        scenes.append(generate_scene(scene_config, [seed, 99, k], k, sigs))
        k += 1
    batch = make_batch(scenes, scene_config, 0.5)
    model = Model.init(scene_config, seed)
    # move off the init so temperatures and text rows are not all identical
    rng = np.random.default_rng([seed, 5])
    model.temps.tau.value += rng.uniform(0.0, 0.05, model.temps.tau.shape)
    for t in model.detector.heads():
        t.value += rng.normal(0.0, 0.1, t.shape)
    pred = detector_forward(batch.raw, model.detector)
    batch = gate_rows(batch, pred.box_offsets, gate, scene_config, 0.5)

    model.zero_grad()
    forward_backward(model, batch, weights)
    analytic = {t.name: t.grad.copy() for t in model.tensors()}

    def objective() -> float:
        return forward_backward(model, batch, weights, backward=False).losses.l_total

    rng = np.random.default_rng([seed, 6])
    # central-difference roundoff grows with |f|; below this magnitude a
    # gradient entry cannot be resolved to the tolerance in float64
    floor = RESOLUTION_FLOOR * max(1.0, abs(objective()))
    errors, probes, kinks = {}, {}, {}
    for group, tensors in model.groups().items():
        rep = finite_diff_check(objective, tensors, eps, max_entries, rng, analytic,
                                kink_state=lambda: relu_pattern(model, batch), floor=floor)
        errors[group] = rep.max_error
        probes[group] = sum(rep.n_probes.values())
        kinks[group] = sum(rep.n_kinks.values())
    return GradcheckReport(seed, errors, probes, len(batch.vl_rows), kinks,
                           time.perf_counter() - t0)


def relu_pattern(model: Model, batch: Batch) -> bytes:
    """Sign pattern of every ReLU input on ``batch``; changes iff a kink is crossed."""
    pred = detector_forward(batch.raw, model.detector)
    parts = [pred._cache["h1_pre"] > 0, pred._cache["f_pre"] > 0]
    if model.has_vl and len(batch.vl_rows):
        _, cache = visual_embed(pred.f[batch.vl_rows], model.projection)
        parts.append(cache.h_pre > 0)
    return b"".join(np.packbits(p).tobytes() for p in parts)
