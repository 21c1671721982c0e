"""Two-component example weights: class-wise effective-number weights plus
per-example conditional weights learned against a balanced development set.

The conditional-weight gradient is computed in closed form. With per-example
training gradients ``g_i`` at ``theta`` the lookahead

    theta_tilde = theta - (eta/|B|) * sum_i (w_{y_i} + eps_i) * g_i

is affine in ``eps``, so

    d L_dev(theta_tilde) / d eps_i = -(eta/|B|) * g_i . grad L_dev(theta_tilde)

exactly, without differentiating through the update.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import LossKind, mean_weighted_loss, per_example_loss
from .models import ModelSpec, forward

__all__ = [
    "ClassWeights",
    "EpsilonBatch",
    "RunningMin",
    "default_beta",
    "effective_number_weights",
    "uniform_weights",
    "loss_and_grad",
    "per_example_grads",
    "lookahead_params",
    "meta_epsilon_gradient",
    "closed_form_meta_gradient",
    "update_epsilon",
    "l2rw_postprocess",
    "total_weight",
    "class_aggregate",
]


@dataclass(frozen=True)
class ClassWeights:
    w: np.ndarray
    beta: float
    counts: np.ndarray
    normalized: bool

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        w.setflags(write=False)
        counts = np.array(self.counts, dtype=np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return self.w.size

    def for_labels(self, labels) -> np.ndarray:
        return self.w[np.asarray(labels, dtype=np.int64)]


def default_beta(n: int) -> float:
    """``(n - 1) / n`` for a training set of ``n`` examples."""
    if n < 1:
        raise ValueError("need at least one training example")
    return (n - 1) / n


def effective_number_weights(counts, beta: float, normalize: bool = True) -> ClassWeights:
    """``w_y = (1 - beta) / (1 - beta**n_y)``, optionally rescaled to sum to K.

    ``beta = 0`` gives all ones (the limit of the formula).
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("counts must be a non-empty 1-D sequence")
    if np.any(counts < 1):
        raise ValueError(f"every class needs at least one example, got counts {counts.tolist()}")
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if beta == 0.0:
        w = np.ones(counts.size)
    else:
        # 1 - beta**n without cancellation; 1 - beta is exact for beta >= 0.5
        log_beta = np.log1p(-(1.0 - beta)) if beta >= 0.5 else np.log(beta)
        one_minus_pow = -np.expm1(counts * log_beta)
        w = (1.0 - beta) / one_minus_pow
    if normalize:
        w = w * (counts.size / w.sum())
    return ClassWeights(w=w, beta=float(beta), counts=counts, normalized=normalize)


def uniform_weights(num_classes: int) -> ClassWeights:
    return ClassWeights(w=np.ones(num_classes), beta=0.0, counts=np.ones(num_classes, dtype=np.int64), normalized=True)


@dataclass
class EpsilonBatch:
    """Conditional weights for one mini-batch; always created at zero."""

    values: np.ndarray
    indices: np.ndarray
    eta: float

    @classmethod
    def zeros(cls, indices, eta: float) -> EpsilonBatch:
        indices = np.asarray(indices, dtype=np.int64)
        return cls(values=np.zeros(indices.size), indices=indices, eta=float(eta))


@dataclass
class RunningMin:
    """Minimum total weight seen so far, plus a per-batch ``(epoch, min)`` history."""

    value: float = float("inf")
    history: list = field(default_factory=list)

    def update(self, x: np.ndarray, epoch: int | None = None) -> None:
        if len(x):
            m = float(np.min(x))
            self.history.append((epoch, m))
            self.value = min(self.value, m)


def loss_and_grad(spec: ModelSpec, theta: np.ndarray, x, y, loss: LossKind, weights=None) -> tuple[float, np.ndarray]:
    """Value and flat gradient of ``(1/n) sum_i weights_i * L_i`` at ``theta``."""
    logits, leaves = forward(spec, theta, x)
    losses = per_example_loss(logits, y, loss)
    if weights is None:
        weights = np.ones(losses.shape[0])
    root = mean_weighted_loss(losses, np.asarray(weights, dtype=np.float64))
    grads = T.grad(root, leaves)
    return root.item(), np.concatenate([g.reshape(-1) for g in grads])


def per_example_grads(spec: ModelSpec, theta: np.ndarray, x, y, loss: LossKind) -> np.ndarray:
    """Stack of ``grad_theta L(f(x_i), y_i)``, one independent tape per example."""
    x = np.asarray(x)
    y = np.asarray(y)
    rows = []
    for i in range(x.shape[0]):
        _, g = loss_and_grad(spec, theta, x[i:i + 1], y[i:i + 1], loss)
        rows.append(g)
    return np.stack(rows)


def lookahead_params(theta: np.ndarray, example_grads: np.ndarray, weights: np.ndarray, eta: float) -> np.ndarray:
    n = example_grads.shape[0]
    return theta - (eta / n) * (np.asarray(weights, dtype=np.float64) @ example_grads)


def meta_epsilon_gradient(
    spec: ModelSpec,
    theta: np.ndarray,
    x_train,
    y_train,
    x_dev,
    y_dev,
    base_weights,
    eps,
    eta: float,
    loss: LossKind,
) -> np.ndarray:
    """Exact ``d L_dev(theta_tilde(eps)) / d eps`` for one training batch.

    ``base_weights`` are the per-example class weights ``w_{y_i}`` (zeros for
    plain L2RW). The development loss is the unweighted batch mean.
    """
    if len(y_train) == 0 or len(y_dev) == 0:
        raise ValueError("meta_epsilon_gradient needs non-empty training and development batches")
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    base_weights = np.asarray(base_weights, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if base_weights.shape != (len(y_train),) or eps.shape != (len(y_train),):
        raise ValueError("base_weights and eps must have one entry per training example")
    g = per_example_grads(spec, theta, x_train, y_train, loss)
    return closed_form_meta_gradient(
        theta, g, base_weights + eps, eta, lambda t: loss_and_grad(spec, t, x_dev, y_dev, loss)[1]
    )


def closed_form_meta_gradient(theta, example_grads, weights, eta: float, dev_grad) -> np.ndarray:
    """Model-agnostic core: ``-(eta/n) * G @ dev_grad(theta_tilde)``.

    ``example_grads`` is the ``(n, P)`` stack of per-example gradients at
    ``theta``, ``weights`` the current total weights and ``dev_grad`` maps
    parameters to the development-loss gradient.
    """
    example_grads = np.asarray(example_grads, dtype=np.float64)
    theta_tilde = lookahead_params(theta, example_grads, weights, eta)
    g_dev = np.asarray(dev_grad(theta_tilde), dtype=np.float64)
    return -(eta / example_grads.shape[0]) * (example_grads @ g_dev)


def update_epsilon(eps: EpsilonBatch, grad, tau: float) -> EpsilonBatch:
    """One unclipped, unnormalized gradient step on the conditional weights."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != eps.values.shape:
        raise ValueError(f"gradient length {grad.size} != batch length {eps.values.size}")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return EpsilonBatch(values=eps.values - tau * grad, indices=eps.indices, eta=eps.eta)


def l2rw_postprocess(raw) -> np.ndarray:
    """Clip negatives to zero, then normalize to sum one (all zeros if nothing survives)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("l2rw_postprocess needs a non-empty weight vector")
    clipped = np.maximum(raw, 0.0)
    total = clipped.sum()
    if total > 0:
        return clipped / total
    return np.zeros_like(clipped)


def total_weight(w: ClassWeights, labels, eps, tracker: RunningMin | None = None, epoch: int | None = None) -> np.ndarray:
    """``w_{y_i} + eps_i``; the batch minimum is recorded in ``tracker`` when given."""
    values = eps.values if isinstance(eps, EpsilonBatch) else np.asarray(eps, dtype=np.float64)
    out = w.for_labels(labels) + values
    if tracker is not None:
        tracker.update(out, epoch)
    return out


def class_aggregate(example_grad, labels, num_classes: int) -> np.ndarray:
    """Sum per-example gradients into per-class gradients (shared class weights)."""
    return np.bincount(np.asarray(labels, dtype=np.int64), weights=np.asarray(example_grad, dtype=np.float64), minlength=num_classes)
