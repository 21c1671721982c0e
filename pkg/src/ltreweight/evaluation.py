"""Balanced-test metrics: top-k error, confusion matrices, conditional-weight summaries."""
from __future__ import annotations

from collections import defaultdict

import numpy as np

__all__ = [
    "true_label_rank",
    "predictions",
    "top_k_error",
    "confusion",
    "per_class_accuracy",
    "epsilon_summary",
]


def true_label_rank(logits, labels) -> np.ndarray:
    """0-based rank of the true label; ties go to the lower class index."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} do not match")
    true = logits[np.arange(len(labels)), labels][:, None]
    cols = np.arange(logits.shape[1])[None, :]
    ahead = (logits > true) | ((logits == true) & (cols < labels[:, None]))
    return ahead.sum(axis=1)


def top_k_error(logits, labels, k: int) -> float:
    logits = np.asarray(logits)
    n_classes = logits.shape[1]
    if not 1 <= k <= n_classes:
        raise ValueError(f"k must lie in [1, {n_classes}], got {k}")
    if len(labels) == 0:
        raise ValueError("top_k_error on an empty set")
    return float(np.mean(true_label_rank(logits, labels) >= k))


def predictions(logits) -> np.ndarray:
    # argmax already returns the lowest index among ties
    return np.argmax(np.asarray(logits), axis=1)


def confusion(logits, labels, num_classes: int | None = None) -> np.ndarray:
    """K x K counts; rows are true classes, columns predicted classes."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1] if num_classes is None else num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, predictions(logits)), 1)
    return cm


def per_class_accuracy(cm) -> np.ndarray:
    cm = np.asarray(cm)
    rows = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(cm) / np.maximum(rows, 1), np.nan)


def epsilon_summary(log, num_classes: int) -> dict[int, np.ndarray]:
    """Per-epoch, per-class mean conditional weight.

    ``log`` is an iterable of ``(epoch, labels, eps)`` records, one per
    stage-2 batch. Classes with no examples in an epoch get NaN.
    """
    sums: dict[int, np.ndarray] = defaultdict(lambda: np.zeros(num_classes))
    counts: dict[int, np.ndarray] = defaultdict(lambda: np.zeros(num_classes))
    for epoch, labels, eps in log:
        labels = np.asarray(labels, dtype=np.int64)
        sums[epoch] += np.bincount(labels, weights=np.asarray(eps, dtype=np.float64), minlength=num_classes)
        counts[epoch] += np.bincount(labels, minlength=num_classes)
    out = {}
    for epoch in sorted(sums):
        with np.errstate(invalid="ignore", divide="ignore"):
            out[epoch] = np.where(counts[epoch] > 0, sums[epoch] / np.maximum(counts[epoch], 1), np.nan)
    return out
