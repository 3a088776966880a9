"""Vision-language branch: projection head, class text embeddings, per-class
temperatures, scaled similarity, branch probabilities and score fusion."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import (
    ParamTensor,
    affine,
    affine_backward,
    l2_normalize,
    l2_normalize_backward,
    relu,
    relu_backward,
    softmax_rows,
)

log = logging.getLogger(__name__)

EMBED_DIM = 512
HIDDEN_DIM = 256
TAU_INIT = 0.07
TAU_MIN = 1e-3


class FormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VLHeadConfig:
    text_embeddings: str | None = None
    embed_dim: int = EMBED_DIM
    hidden_dim: int = HIDDEN_DIM
    tau_init: float = TAU_INIT

    def __post_init__(self):
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ValueError("embed_dim and hidden_dim must be positive")
        if not self.tau_init >= TAU_MIN:
            raise ValueError(f"tau_init must be >= {TAU_MIN}")


@dataclass
class ProjectionHeadParams:
    W1: ParamTensor
    b1: ParamTensor
    W2: ParamTensor
    b2: ParamTensor

    @classmethod
    def init(cls, feat_dim: int, rng: np.random.Generator,
             hidden: int = HIDDEN_DIM, embed_dim: int = EMBED_DIM) -> "ProjectionHeadParams":
        # He init for the ReLU layer, Xavier-ish for the output layer
        return cls(
            W1=ParamTensor("proj.W1", rng.normal(0.0, np.sqrt(2.0 / feat_dim), (feat_dim, hidden))),
            b1=ParamTensor("proj.b1", np.zeros(hidden)),
            W2=ParamTensor("proj.W2", rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, embed_dim))),
            b2=ParamTensor("proj.b2", np.zeros(embed_dim)),
        )

    def tensors(self) -> list[ParamTensor]:
        return [self.W1, self.b1, self.W2, self.b2]

    @property
    def embed_dim(self) -> int:
        return self.W2.shape[1]


@dataclass
class TextEmbeddingTable:
    embeddings: ParamTensor
    class_names: list[str]

    @property
    def num_classes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class TemperatureVector:
    tau: ParamTensor

    @classmethod
    def init(cls, num_classes: int, value: float = TAU_INIT) -> "TemperatureVector":
        return cls(ParamTensor("tau", np.full(num_classes, float(value))))

    def clamp(self, tau_min: float = TAU_MIN) -> int:
        """Clamp in place; returns how many entries were raised."""
        low = self.tau.value < tau_min
        n = int(low.sum())
        if n:
            log.warning("clamping %d temperature(s) to %g", n, tau_min)
            self.tau.value[low] = tau_min
        return n


def default_class_names(num_classes: int) -> list[str]:
    return [f"class_{c}" for c in range(num_classes)]


def init_text_embeddings(
    num_classes: int,
    dim: int = EMBED_DIM,
    seed: int | None = 0,
    path: str | Path | None = None,
    class_names: list[str] | None = None,
) -> TextEmbeddingTable:
    """Seeded-random unit rows, or rows imported from a JSON file at ``path``."""
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    if path is not None:
        return load_text_embeddings(path, num_classes, dim)
    rng = np.random.default_rng(seed)
    rows = l2_normalize(rng.standard_normal((num_classes, dim)))
    names = class_names or default_class_names(num_classes)
    return TextEmbeddingTable(ParamTensor("text", rows), list(names))


def load_text_embeddings(path: str | Path, num_classes: int, dim: int) -> TextEmbeddingTable:
    """Read ``{"dim": D, "classes": [{"name": ..., "vector": [...]}, ...]}``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read text embeddings from {path}: {e}") from e
    if not isinstance(doc, dict) or set(doc) != {"dim", "classes"}:
        raise FormatError("text embedding file must have exactly the keys 'dim' and 'classes'")
    if doc["dim"] != dim:
        raise FormatError(f"embedding dim {doc['dim']} != expected {dim}")
    classes = doc["classes"]
    if len(classes) != num_classes:
        raise FormatError(f"expected {num_classes} class vectors, got {len(classes)}")
    names, rows = [], []
    for entry in classes:
        vec = entry.get("vector")
        if vec is None or len(vec) != dim:
            raise FormatError(f"class {entry.get('name')!r}: vector length != {dim}")
        names.append(str(entry.get("name", f"class_{len(names)}")))
        rows.append(vec)
    arr = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise FormatError("non-finite value in text embeddings")
    return TextEmbeddingTable(ParamTensor("text", l2_normalize(arr)), names)


def save_text_embeddings(table: TextEmbeddingTable, path: str | Path) -> None:
    doc = {
        "dim": table.dim,
        "classes": [
            {"name": n, "vector": row.tolist()}
            for n, row in zip(table.class_names, table.embeddings.value)
        ],
    }
    Path(path).write_text(json.dumps(doc))


@dataclass
class EmbedCache:
    f: np.ndarray
    h_pre: np.ndarray
    h: np.ndarray
    z: np.ndarray
    vhat: np.ndarray


def visual_embed(f: np.ndarray, params: ProjectionHeadParams) -> tuple[np.ndarray, EmbedCache]:
    """Project features to unit-norm embeddings; returns (vhat, cache)."""
    h_pre = affine(f, params.W1.value, params.b1.value)
    h = relu(h_pre)
    z = affine(h, params.W2.value, params.b2.value)
    vhat = l2_normalize(z)
    return vhat, EmbedCache(f, h_pre, h, z, vhat)


def visual_embed_backward(G: np.ndarray, cache: EmbedCache, params: ProjectionHeadParams) -> np.ndarray:
    """Accumulate projection-head grads; returns the gradient w.r.t. the features."""
    dz = l2_normalize_backward(G, cache.z)
    dh, dW2, db2 = affine_backward(dz, cache.h, params.W2.value)
    params.W2.grad += dW2
    params.b2.grad += db2
    dh_pre = relu_backward(dh, cache.h_pre)
    df, dW1, db1 = affine_backward(dh_pre, cache.f, params.W1.value)
    params.W1.grad += dW1
    params.b1.grad += db1
    return df


def similarity(vhat: np.ndarray, table: TextEmbeddingTable, temps: TemperatureVector) -> np.ndarray:
    """Scaled dot products ``s[i, c] = vhat_i . t_c / tau_c``."""
    if vhat.shape[1] != table.dim:
        raise ValueError(f"embedding dim {vhat.shape[1]} != table dim {table.dim}")
    if temps.tau.shape[0] != table.num_classes:
        raise ValueError("temperature count != class count")
    temps.clamp()
    return (vhat @ table.embeddings.value.T) / temps.tau.value


def similarity_backward(G: np.ndarray, vhat: np.ndarray,
                        table: TextEmbeddingTable, temps: TemperatureVector) -> np.ndarray:
    """Accumulate text/temperature grads; returns the gradient w.r.t. ``vhat``."""
    tau = temps.tau.value
    T = table.embeddings.value
    Gs = G / tau
    table.embeddings.grad += Gs.T @ vhat
    raw = vhat @ T.T
    temps.tau.grad += -np.sum(G * raw, axis=0) / tau**2
    return Gs @ T


def clip_probs(sim: np.ndarray) -> np.ndarray:
    return softmax_rows(sim)


def fuse_scores(p_ce: np.ndarray, p_clip: np.ndarray, alpha: float = 0.7) -> np.ndarray:
    """Convex combination ``alpha * p_ce + (1 - alpha) * p_clip``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if p_ce.shape != p_clip.shape:
        raise ValueError("probability matrices differ in shape")
    return alpha * p_ce + (1.0 - alpha) * p_clip
