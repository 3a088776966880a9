"""JSON and JSON-lines artifacts: datasets, detections, checkpoints, metrics.

Floats are written with Python's shortest round-trip repr, so arrays survive
save/load bit-exactly and identical runs produce byte-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .geometry import Box, Detection
from .nanodet import SceneConfig, SyntheticScene
from .vlhead import FormatError

CHECKPOINT_FORMAT = "clipjoint-checkpoint/1"


def dumps(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, allow_nan=False)


def write_json(path: str | Path, doc: Any) -> None:
    Path(path).write_text(dumps(doc) + "\n")


def read_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from e


def meta_path(path: str | Path) -> Path:
    """Sidecar provenance file for a JSON-lines artifact."""
    p = Path(path)
    return p.with_name(p.name + ".meta.json")


def _read_lines(path: str | Path) -> list[dict]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{n}: invalid JSON: {e}") from e
    return out


def _write_lines(path: str | Path, docs: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for d in docs:
            fh.write(dumps(d) + "\n")


# ---- datasets --------------------------------------------------------------

def scene_to_doc(scene: SyntheticScene) -> dict:
    return {
        "scene_id": int(scene.scene_id),
        "raw": scene.raw.tolist(),
        "gts": [{"box": [float(v) for v in box], "class_id": int(c)} for box, c in scene.gts],
    }


def scene_from_doc(doc: dict, config: SceneConfig | None = None) -> SyntheticScene:
    try:
        raw = np.asarray(doc["raw"], dtype=np.float64)
        gts = [(Box(*map(float, g["box"])), int(g["class_id"])) for g in doc["gts"]]
        scene_id = int(doc["scene_id"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed scene record: {e}") from e
    if raw.ndim != 2 or not np.all(np.isfinite(raw)):
        raise FormatError(f"scene {scene_id}: raw must be a finite 2-D array")
    if config is not None:
        want = (config.num_cells, config.raw_dim)
        if raw.shape != want:
            raise FormatError(f"scene {scene_id}: raw shape {raw.shape} != expected {want}")
        bad = [c for _, c in gts if not 0 <= c < config.num_classes]
        if bad:
            raise FormatError(f"scene {scene_id}: class id {bad[0]} out of range")
    for box, _ in gts:
        if not (box.x_min <= box.x_max and box.y_min <= box.y_max):
            raise FormatError(f"scene {scene_id}: inverted box {list(box)}")
    return SyntheticScene(raw, gts, scene_id)


def write_dataset(path: str | Path, scenes: Sequence[SyntheticScene]) -> None:
    _write_lines(path, (scene_to_doc(s) for s in scenes))


def read_dataset(path: str | Path, config: SceneConfig | None = None) -> list[SyntheticScene]:
    return [scene_from_doc(d, config) for d in _read_lines(path)]


# ---- detections ------------------------------------------------------------

def detections_to_doc(scene_id: int, dets: Sequence[Detection]) -> dict:
    return {
        "scene_id": int(scene_id),
        "detections": [
            {"box": [float(v) for v in d.box], "class_id": int(d.class_id), "score": float(d.score)}
            for d in dets
        ],
    }


def write_detections(path: str | Path, scene_ids: Sequence[int], dets: Sequence[Sequence[Detection]]) -> None:
    _write_lines(path, (detections_to_doc(i, d) for i, d in zip(scene_ids, dets)))


def read_detections(path: str | Path) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    for doc in _read_lines(path):
        try:
            out[int(doc["scene_id"])] = [
                Detection(Box(*map(float, d["box"])), int(d["class_id"]), float(d["score"]))
                for d in doc["detections"]
            ]
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"malformed detection record: {e}") from e
    return out


# ---- checkpoints -----------------------------------------------------------

def _pack(arrays: dict[str, np.ndarray]) -> dict:
    return {name: {"shape": list(a.shape), "values": a.reshape(-1).tolist()}
            for name, a in arrays.items()}


def _unpack(doc: dict, name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in doc["shape"])
        values = np.asarray(doc["values"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{name}: malformed array entry: {e}") from e
    if values.size != math.prod(shape):
        raise FormatError(f"{name}: {values.size} values for shape {list(shape)}")
    return values.reshape(shape)


def history_docs(history) -> list[dict]:
    return [asdict(r) for r in history]


def checkpoint_doc(trainer, config: dict, vl_branch: bool) -> dict:
    model = trainer.model
    return {
        "format": CHECKPOINT_FORMAT,
        "config": config,
        "seed": trainer.config.seed,
        "vl_branch": vl_branch,
        "step": trainer.step_count,
        "epoch": trainer.epoch,
        "class_names": list(model.text.class_names) if model.has_vl else None,
        "params": _pack({t.name: t.value for t in model.tensors()}),
        "velocity": _pack(trainer.velocity),
        "history": history_docs(trainer.history),
    }


def save_checkpoint(path: str | Path, trainer, config: dict, vl_branch: bool) -> None:
    write_json(path, checkpoint_doc(trainer, config, vl_branch))


def load_checkpoint(path: str | Path) -> dict:
    doc = read_json(path)
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a {CHECKPOINT_FORMAT} document")
    for key in ("config", "params", "velocity", "step", "epoch", "vl_branch"):
        if key not in doc:
            raise FormatError(f"{path}: missing {key!r}")
    return doc


def restore_model(model, doc: dict) -> None:
    """Copy checkpointed parameter values into ``model`` (names and shapes must match)."""
    params = doc["params"]
    tensors = {t.name: t for t in model.tensors()}
    if set(params) != set(tensors):
        missing = sorted(set(tensors) ^ set(params))
        raise FormatError(f"checkpoint parameters differ from the model: {missing}")
    for name, t in tensors.items():
        value = _unpack(params[name], name)
        if value.shape != t.shape:
            raise FormatError(f"{name}: checkpoint shape {value.shape} != model shape {t.shape}")
        t.value[...] = value
        t.zero_grad()
    if model.has_vl and doc.get("class_names"):
        model.text.class_names = list(doc["class_names"])


def restore_trainer(trainer, doc: dict) -> None:
    """Restore parameters, momentum buffers, counters and history."""
    from .trainer import EpochRecord

    restore_model(trainer.model, doc)
    if set(doc["velocity"]) != set(trainer.velocity):
        raise FormatError("checkpoint velocity buffers differ from the model")
    for name in trainer.velocity:
        v = _unpack(doc["velocity"][name], name)
        if v.shape != trainer.velocity[name].shape:
            raise FormatError(f"velocity {name}: shape mismatch")
        trainer.velocity[name] = v
    trainer.step_count = int(doc["step"])
    trainer.epoch = int(doc["epoch"])
    trainer.history = [EpochRecord(**r) for r in doc.get("history", [])]


def metrics_doc(trainer, config: dict) -> dict:
    return {
        "mode": trainer.config.mode,
        "config": config,
        "seed": trainer.config.seed,
        "history": history_docs(trainer.history),
    }
