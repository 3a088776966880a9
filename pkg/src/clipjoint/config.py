"""Run configuration file: one JSON document with sections
``scene``, ``train``, ``vlhead``, ``eval`` and ``paths``.

Unknown sections or keys are rejected. The resolved document (defaults
filled in) is echoed into every artifact the CLI writes.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .nanodet import SceneConfig
from .trainer import TrainConfig, toy_train_config
from .vlhead import VLHeadConfig


class ConfigValidationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    alpha: float = 0.7
    obj_threshold: float = 0.05
    nms_iou: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError("nms_iou must lie in (0, 1]")


@dataclass(frozen=True)
class PathsConfig:
    data: str | None = None
    val_data: str | None = None
    out_dir: str | None = None


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=toy_train_config)
    vlhead: VLHeadConfig = field(default_factory=VLHeadConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, section: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


SECTIONS = {
    "scene": SceneConfig,
    "train": TrainConfig,
    "vlhead": VLHeadConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}


def _build(cls, base, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigValidationError(f"section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigValidationError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    try:
        return dataclasses.replace(base, **values)
    except (TypeError, ValueError) as e:
        raise ConfigValidationError(f"invalid {section!r} section: {e}") from e


def parse_config(doc: dict | None) -> RunConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigValidationError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigValidationError(f"unknown section(s): {', '.join(unknown)}")
    base = RunConfig()
    parts = {name: _build(cls, getattr(base, name), doc.get(name, {}), name)
             for name, cls in SECTIONS.items()}
    return RunConfig(**parts)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigValidationError(f"cannot read config {path}: {e}") from e
    return parse_config(doc)
