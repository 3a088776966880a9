"""Dense float64 array ops with hand-written backward passes.

Every forward op here has a matching ``*_backward`` that maps an upstream
gradient to gradients of its inputs. Gradients are verified against central
finite differences by :func:`finite_diff_check`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable

import numpy as np

EPS_NORM = 1e-12


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class DegenerateVectorError(NumericError):
    pass


def _require_finite(*arrays: np.ndarray, what: str = "input") -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite {what}")


@dataclass
class ParamTensor:
    """A learnable array plus its accumulated gradient."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape {self.grad.shape} != {self.value.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise DimensionError("affine expects x[N,D], W[D,H], b[H]")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    _require_finite(x, what="affine input")
    _require_finite(W, b, what="affine weight or bias")
    return x @ W + b


def affine_backward(G: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Returns (dx, dW, db) for out = x @ W + b."""
    return G @ W.T, x.T @ G, G.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    _require_finite(x)
    return np.maximum(x, 0.0)


def relu_backward(G: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0.0, G, 0.0)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Normalize a vector, or each row of a matrix, to unit L2 norm."""
    _require_finite(v)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm <= EPS_NORM):
        raise DegenerateVectorError(f"vector norm <= {EPS_NORM}")
    return v / norm


def l2_normalize_backward(G: np.ndarray, v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    out = v / norm
    return (G - out * np.sum(out * G, axis=-1, keepdims=True)) / norm


def softmax_rows(s: np.ndarray) -> np.ndarray:
    _require_finite(s, what="softmax logits")
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(G: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Backward through softmax given its output ``p``."""
    return p * (G - np.sum(G * p, axis=-1, keepdims=True))


def log_softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    m = s.max(axis=axis, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    n_probes: dict[str, int]
    n_kinks: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failing(self, tol: float) -> list[str]:
        return [k for k, v in self.errors.items() if not v < tol]


def relative_error(a, n, floor: float = 1e-12):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(
    f: Callable[[], float],
    params: Iterable[ParamTensor],
    eps: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    analytic: dict[str, np.ndarray] | None = None,
    kink_state: Callable[[], Hashable] | None = None,
    floor: float = 1e-12,
) -> GradCheckReport:
    """Compare analytic gradients with central differences of ``f``.

    ``f`` is evaluated with no arguments and must read the current values of
    ``params``; entries are perturbed in place and restored. Analytic
    gradients come from ``analytic[name]`` when given, else ``param.grad``.
    With ``max_entries`` only that many random entries per tensor are probed.

    ``kink_state`` returns e.g. the ReLU sign pattern; a probe whose
    perturbations change it straddles a non-differentiable point and is
    counted in ``n_kinks`` instead of being scored. ``floor`` bounds the
    relative-error denominator from below.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-8, 1e-4]")
    rng = rng if rng is not None else np.random.default_rng(0)
    base = kink_state() if kink_state is not None else None
    errors: dict[str, float] = {}
    counts: dict[str, int] = {}
    kinks: dict[str, int] = {}
    for p in params:
        grad = (analytic[p.name] if analytic is not None else p.grad).reshape(-1)
        flat = p.value.reshape(-1)
        size = flat.size
        if max_entries is not None and size > max_entries:
            idx = np.sort(rng.choice(size, size=max_entries, replace=False))
        else:
            idx = np.arange(size)
        worst, crossed = 0.0, 0
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            fp = f()
            sp = kink_state() if kink_state is not None else None
            flat[k] = orig - eps
            fm = f()
            sm = kink_state() if kink_state is not None else None
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite objective while probing {p.name}[{k}]")
            if kink_state is not None and not (sp == base == sm):
                crossed += 1
                continue
            num = (fp - fm) / (2.0 * eps)
            worst = max(worst, float(relative_error(grad[k], num, floor)))
        errors[p.name] = worst
        counts[p.name] = len(idx) - crossed
        kinks[p.name] = crossed
    return GradCheckReport(errors, counts, kinks)
