"""Per-example classification losses on the autodiff tape.

Every loss returns one entry per example; reduction happens only in
:func:`mean_weighted_loss` so that per-example weights enter the graph once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "LossKind",
    "cross_entropy",
    "focal",
    "ldam",
    "ldam_margins",
    "per_example_loss",
    "mean_weighted_loss",
]


@dataclass(frozen=True)
class LossKind:
    name: str
    gamma: float = 0.0
    max_margin: float = 0.0
    scale: float = 1.0
    class_counts: tuple[int, ...] = ()

    def __post_init__(self):
        if self.name not in ("cross_entropy", "focal", "ldam"):
            raise ValueError(f"unknown loss {self.name!r}")
        if self.gamma < 0:
            raise ValueError(f"focal gamma must be >= 0, got {self.gamma}")
        if self.name == "ldam":
            if self.scale <= 0:
                raise ValueError("ldam scale must be positive")
            if self.max_margin < 0:
                raise ValueError("ldam max_margin must be non-negative")
            if not self.class_counts or min(self.class_counts) < 1:
                raise ValueError("ldam needs class counts, all >= 1")


def cross_entropy() -> LossKind:
    return LossKind("cross_entropy")


def focal(gamma: float = 0.5) -> LossKind:
    return LossKind("focal", gamma=float(gamma))


def ldam(class_counts, max_margin: float | None = None, scale: float = 30.0) -> LossKind:
    """LDAM with margins ``max_margin / n_y**0.25``.

    When ``max_margin`` is omitted it is chosen so the largest margin is 0.5.
    """
    counts = tuple(int(c) for c in class_counts)
    if max_margin is None:
        if not counts or min(counts) < 1:
            raise ValueError("ldam needs class counts, all >= 1")
        max_margin = 0.5 * min(counts) ** 0.25
    return LossKind("ldam", max_margin=float(max_margin), scale=float(scale), class_counts=counts)


def ldam_margins(kind: LossKind) -> np.ndarray:
    return kind.max_margin / np.asarray(kind.class_counts, dtype=np.float64) ** 0.25


def _check_labels(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise T.ShapeError(f"per_example_loss: logits must be 2-D, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise T.ShapeError(f"per_example_loss: labels shape {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def per_example_loss(logits: Tensor, labels, kind: LossKind) -> Tensor:
    labels = _check_labels(logits, labels)
    if kind.name == "ldam":
        k = logits.shape[1]
        if len(kind.class_counts) != k:
            raise ValueError(f"ldam has {len(kind.class_counts)} class counts for {k} logits")
        shift = np.zeros(logits.shape)
        shift[np.arange(len(labels)), labels] = ldam_margins(kind)[labels]
        logits = T.scale(logits - shift, kind.scale)
    log_p = T.gather(logits, labels) - T.logsumexp(logits)
    if kind.name == "focal":
        modulator = T.power(1.0 - T.exp(log_p), kind.gamma)
        return -(modulator * log_p)
    return -log_p


def mean_weighted_loss(losses: Tensor, weights) -> Tensor:
    """``(1/|B|) * sum_i weights_i * losses_i``; ``weights`` may itself be on the tape."""
    weights = T.constant(weights)
    if losses.ndim != 1 or weights.shape != losses.shape:
        raise T.ShapeError(f"mean_weighted_loss: losses {losses.shape} vs weights {weights.shape}")
    n = losses.shape[0]
    if n == 0:
        raise ValueError("mean_weighted_loss: empty batch")
    return T.scale(T.tsum(weights * losses), 1.0 / n)
