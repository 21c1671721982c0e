"""Two-stage training: plain pretraining followed by meta-weighted training.

Stage 1 runs ``stage1_steps`` unweighted mini-batch steps. Stage 2 runs
``stage2_steps`` steps whose per-example weights depend on the mode:

* ``vanilla``         all ones
* ``class_balanced``  effective-number class weights ``w_y``
* ``ours``            ``w_y + eps_i`` with ``eps`` re-learned on every batch
* ``l2rw``            meta-gradient weights, clipped and normalized per batch
* ``ours_learn_w``    class weights themselves meta-learned and persisted

The lookahead step inside stage 2 is always a plain gradient step at the
current learning rate; the real update uses SGD with momentum.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .evaluation import epsilon_summary, top_k_error
from .losses import LossKind, cross_entropy
from .models import ModelSpec, forward, init_params
from .seeding import stream
from .weighting import (
    ClassWeights,
    EpsilonBatch,
    RunningMin,
    class_aggregate,
    default_beta,
    effective_number_weights,
    l2rw_postprocess,
    loss_and_grad,
    meta_epsilon_gradient,
    total_weight,
    uniform_weights,
    update_epsilon,
)

log = logging.getLogger(__name__)

MODES = ("vanilla", "class_balanced", "l2rw", "ours", "ours_learn_w")

__all__ = [
    "MODES",
    "TrainConfig",
    "TrainState",
    "EpochSampler",
    "TrainResult",
    "lr_at",
    "init_state",
    "sgd_momentum_step",
    "stage1_pretrain",
    "stage2_meta_train",
    "train_l2rw",
    "train_ours_learn_w",
    "class_weights_for",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    meta_lr: float = 1e-3
    stage1_steps: int = 0
    stage2_steps: int = 0
    batch_size: int = 100
    dev_batch_size: int | None = None
    momentum: float = 0.9
    lr_schedule: tuple[tuple[int, float], ...] = ()
    loss: LossKind = field(default_factory=cross_entropy)
    mode: str = "ours"
    beta: float | None = None
    normalize_weights: bool = True
    seed: int = 0
    l2rw_pretrain: bool = False
    l2rw_two_component: bool = False
    stage2_class_weights: bool = True
    switch_at_first_decay: bool = False
    eval_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_schedule", tuple((int(s), float(m)) for s, m in self.lr_schedule))
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.meta_lr < 0:
            raise ValueError("meta_lr must be non-negative")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValueError("stage step counts must be non-negative")
        if self.batch_size < 1 or (self.dev_batch_size is not None and self.dev_batch_size < 1):
            raise ValueError("batch sizes must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        steps = [s for s, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("lr_schedule steps must be strictly increasing")
        if self.switch_at_first_decay and not self.lr_schedule:
            raise ValueError("switch_at_first_decay needs an lr_schedule")

    @property
    def stage_lengths(self) -> tuple[int, int]:
        """``(t1, t2)`` after applying the switch-at-first-decay rule."""
        if self.switch_at_first_decay:
            total = self.stage1_steps + self.stage2_steps
            t1 = min(self.lr_schedule[0][0], total)
            return t1, total - t1
        return self.stage1_steps, self.stage2_steps


def lr_at(config: TrainConfig, step: int) -> float:
    lr = config.lr
    for s, m in config.lr_schedule:
        if step >= s:
            lr *= m
    return lr


class EpochSampler:
    """Shuffled passes over ``n`` indices; the trailing partial batch is dropped."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot sample batches from an empty set")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.epoch = -1
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    @property
    def batches_per_epoch(self) -> int:
        return self.n // self.batch_size

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
            self.epoch += 1
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


@dataclass
class TrainState:
    theta: np.ndarray
    velocity: np.ndarray
    step: int = 0
    batches: EpochSampler | None = None
    dev_batches: EpochSampler | None = None
    learned_w: np.ndarray | None = None
    min_total_weight: RunningMin = field(default_factory=RunningMin)
    eps_log: list = field(default_factory=list)
    weight_sums: list = field(default_factory=list)
    step_log: list = field(default_factory=list)


def init_state(spec: ModelSpec, train_set: LabeledDataset, config: TrainConfig, dev_set: LabeledDataset | None = None) -> TrainState:
    theta = init_params(spec)
    state = TrainState(theta=theta, velocity=np.zeros_like(theta))
    state.batches = EpochSampler(len(train_set), config.batch_size, stream(config.seed, "batching"))
    if dev_set is not None:
        state.dev_batches = EpochSampler(
            len(dev_set), config.dev_batch_size or config.batch_size, stream(config.seed, "dev_batching")
        )
    return state


def sgd_momentum_step(state: TrainState, grad: np.ndarray, lr: float, momentum: float) -> TrainState:
    """``v <- m*v + g``; ``theta <- theta - lr*v``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.theta.shape:
        raise ValueError(f"gradient length {grad.size} != parameter length {state.theta.size}")
    with np.errstate(over="ignore", invalid="ignore"):
        state.velocity = momentum * state.velocity + grad
        state.theta = state.theta - lr * state.velocity
    state.step += 1
    if not np.all(np.isfinite(state.theta)):
        raise FloatingPointError(f"parameters became non-finite at step {state.step}; lower lr or meta_lr")
    return state


def _weighted_step(state, spec, x, y, weights, config) -> float:
    lr = lr_at(config, state.step)
    value, g = loss_and_grad(spec, state.theta, x, y, config.loss, weights)
    sgd_momentum_step(state, g, lr, config.momentum)
    return value


def _record(state, stage, value, epoch):
    state.step_log.append((state.step, stage, value, epoch))


def stage1_pretrain(state: TrainState, spec: ModelSpec, train_set: LabeledDataset, config: TrainConfig, steps: int | None = None) -> TrainState:
    """Unweighted mini-batch SGD on the training set."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    steps = config.stage_lengths[0] if steps is None else steps
    for _ in range(steps):
        idx = state.batches.next()
        x, y = train_set.features[idx], train_set.labels[idx]
        value = _weighted_step(state, spec, x, y, np.ones(len(idx)), config)
        _record(state, 1, value, state.batches.epoch)
    return state


def _dev_batch(state: TrainState, dev_set: LabeledDataset):
    idx = state.dev_batches.next()
    return dev_set.features[idx], dev_set.labels[idx]


def _check_stage2(dev_set, config):
    if dev_set is None or len(dev_set) == 0:
        raise ValueError("stage 2 needs a non-empty development set")
    if config.meta_lr < 0:
        raise ValueError("meta_lr must be non-negative")


def stage2_meta_train(
    state: TrainState,
    spec: ModelSpec,
    train_set: LabeledDataset,
    dev_set: LabeledDataset,
    w: ClassWeights,
    config: TrainConfig,
    steps: int | None = None,
) -> TrainState:
    """Meta-learned conditional weights on top of class weights ``w``."""
    _check_stage2(dev_set, config)
    steps = config.stage_lengths[1] if steps is None else steps
    for _ in range(steps):
        idx = state.batches.next()
        epoch = state.batches.epoch
        x, y = train_set.features[idx], train_set.labels[idx]
        eta = lr_at(config, state.step)
        eps = EpsilonBatch.zeros(idx, eta)
        base = w.for_labels(y)
        xd, yd = _dev_batch(state, dev_set)
        meta_grad = meta_epsilon_gradient(spec, state.theta, x, y, xd, yd, base, eps.values, eta, config.loss)
        eps = update_epsilon(eps, meta_grad, config.meta_lr)
        weights = total_weight(w, y, eps, state.min_total_weight, epoch)
        state.eps_log.append((epoch, y.copy(), eps.values.copy()))
        value = _weighted_step(state, spec, x, y, weights, config)
        _record(state, 2, value, epoch)
    return state


def train_l2rw(
    state: TrainState,
    spec: ModelSpec,
    train_set: LabeledDataset,
    dev_set: LabeledDataset,
    config: TrainConfig,
    w: ClassWeights | None = None,
    steps: int | None = None,
) -> TrainState:
    """Meta-gradient weights passed through clip-and-normalize.

    Without ``w`` the raw weights start at zero (plain L2RW); with ``w`` they
    start at the class weights, giving the two-component variant. The
    normalized weights ``p`` (summing to one) give the batch loss
    ``sum_i p_i L_i``.
    """
    _check_stage2(dev_set, config)
    steps = config.stage_lengths[1] if steps is None else steps
    for _ in range(steps):
        idx = state.batches.next()
        epoch = state.batches.epoch
        x, y = train_set.features[idx], train_set.labels[idx]
        eta = lr_at(config, state.step)
        eps = EpsilonBatch.zeros(idx, eta)
        base = np.zeros(len(idx)) if w is None else w.for_labels(y)
        xd, yd = _dev_batch(state, dev_set)
        meta_grad = meta_epsilon_gradient(spec, state.theta, x, y, xd, yd, base, eps.values, eta, config.loss)
        eps = update_epsilon(eps, meta_grad, config.meta_lr)
        probs = l2rw_postprocess(base + eps.values)
        state.weight_sums.append(float(probs.sum()))
        state.eps_log.append((epoch, y.copy(), eps.values.copy()))
        state.min_total_weight.update(probs, epoch)
        value = _weighted_step(state, spec, x, y, probs * len(idx), config)
        _record(state, 2, value, epoch)
    return state


def train_ours_learn_w(
    state: TrainState,
    spec: ModelSpec,
    train_set: LabeledDataset,
    dev_set: LabeledDataset,
    w: ClassWeights,
    config: TrainConfig,
    steps: int | None = None,
) -> TrainState:
    """Meta-learn the K class weights (shared within a class) instead of ``eps``."""
    _check_stage2(dev_set, config)
    if state.learned_w is None:
        state.learned_w = w.w.copy()
    k = state.learned_w.size
    steps = config.stage_lengths[1] if steps is None else steps
    for _ in range(steps):
        idx = state.batches.next()
        epoch = state.batches.epoch
        x, y = train_set.features[idx], train_set.labels[idx]
        eta = lr_at(config, state.step)
        base = state.learned_w[y]
        xd, yd = _dev_batch(state, dev_set)
        meta_grad = meta_epsilon_gradient(spec, state.theta, x, y, xd, yd, base, np.zeros(len(idx)), eta, config.loss)
        state.learned_w = state.learned_w - config.meta_lr * class_aggregate(meta_grad, y, k)
        weights = state.learned_w[y]
        state.min_total_weight.update(weights, epoch)
        value = _weighted_step(state, spec, x, y, weights, config)
        _record(state, 2, value, epoch)
    return state


def class_weights_for(train_set: LabeledDataset, config: TrainConfig) -> ClassWeights:
    beta = default_beta(len(train_set)) if config.beta is None else config.beta
    counts = np.maximum(train_set.class_counts, 1)
    return effective_number_weights(counts, beta, normalize=config.normalize_weights)


@dataclass
class TrainResult:
    theta: np.ndarray
    state: TrainState
    class_weights: ClassWeights
    metrics: list[dict]
    trajectory: list[np.ndarray]

    @property
    def min_total_weight(self) -> float:
        return self.state.min_total_weight.value

    def epsilon_summary(self, num_classes: int) -> dict[int, np.ndarray]:
        return epsilon_summary(self.state.eps_log, num_classes)


def _evaluate(spec, theta, test_set: LabeledDataset) -> dict:
    logits, _ = forward(spec, theta, test_set.features, track=False)
    k = logits.shape[1]
    return {f"top{j}_error": top_k_error(logits.data, test_set.labels, min(j, k)) for j in (1, 3, 5)}


def train(
    spec: ModelSpec,
    train_set: LabeledDataset,
    dev_set: LabeledDataset | None,
    config: TrainConfig,
    test_set: LabeledDataset | None = None,
    record_trajectory: bool = False,
) -> TrainResult:
    """Run both stages for ``config.mode`` and return the final parameters and logs.

    With ``eval_every > 0`` a metrics row is produced every ``eval_every``
    steps and at the end; otherwise only at the end.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    state = init_state(spec, train_set, config, dev_set)
    w_eff = class_weights_for(train_set, config)
    k = train_set.num_classes
    t1, t2 = config.stage_lengths
    stage2_w = w_eff if config.stage2_class_weights else uniform_weights(k)

    plan: list[tuple[str, int]]
    if config.mode == "l2rw" and not config.l2rw_pretrain:
        plan = [("stage2", t1 + t2)]
    else:
        plan = [("stage1", t1), ("stage2", t2)]

    metrics: list[dict] = []
    trajectory: list[np.ndarray] = [state.theta.copy()] if record_trajectory else []
    chunk = config.eval_every if config.eval_every > 0 else None
    log_from, eps_from = 0, 0

    def run_chunk(stage: str, n: int):
        if stage == "stage1":
            stage1_pretrain(state, spec, train_set, config, steps=n)
        elif config.mode == "vanilla":
            stage1_pretrain(state, spec, train_set, config, steps=n)
        elif config.mode == "class_balanced":
            for _ in range(n):
                idx = state.batches.next()
                x, y = train_set.features[idx], train_set.labels[idx]
                weights = total_weight(stage2_w, y, np.zeros(len(idx)), state.min_total_weight, state.batches.epoch)
                value = _weighted_step(state, spec, x, y, weights, config)
                _record(state, 2, value, state.batches.epoch)
        elif config.mode == "ours":
            stage2_meta_train(state, spec, train_set, dev_set, stage2_w, config, steps=n)
        elif config.mode == "l2rw":
            train_l2rw(state, spec, train_set, dev_set, config, w=w_eff if config.l2rw_two_component else None, steps=n)
        else:
            train_ours_learn_w(state, spec, train_set, dev_set, stage2_w, config, steps=n)

    for stage, n in plan:
        remaining = n
        while remaining > 0:
            step_n = remaining
            if chunk:
                step_n = min(step_n, chunk - state.step % chunk)
            if record_trajectory:
                step_n = 1
            run_chunk(stage, step_n)
            remaining -= step_n
            if record_trajectory:
                trajectory.append(state.theta.copy())
            if chunk and state.step % chunk == 0:
                metrics.append(_interval_row(state, config, spec, test_set, k, log_from, eps_from))
                log_from, eps_from = len(state.step_log), len(state.eps_log)
    if not metrics or metrics[-1]["step"] != state.step:
        metrics.append(_interval_row(state, config, spec, test_set, k, log_from, eps_from))
    log.debug("mode=%s finished at step %d", config.mode, state.step)
    return TrainResult(theta=state.theta, state=state, class_weights=w_eff, metrics=metrics, trajectory=trajectory)


def _interval_row(state, config, spec, test_set, num_classes, log_from, eps_from) -> dict:
    recent = [v for (_, _, v, _) in state.step_log[log_from:]]
    row = {"step": state.step, "mode": config.mode, "train_loss": float(np.mean(recent)) if recent else float("nan")}
    if test_set is not None:
        row.update(_evaluate(spec, state.theta, test_set))
    mtw = state.min_total_weight.value
    row["min_total_weight"] = mtw if np.isfinite(mtw) else float("nan")
    means = np.full(num_classes, np.nan)
    window = state.eps_log[eps_from:]
    if window:
        means = epsilon_summary([(0, lab, e) for (_, lab, e) in window], num_classes)[0]
    for c in range(num_classes):
        row[f"eps_mean_{c}"] = float(means[c])
    return row
