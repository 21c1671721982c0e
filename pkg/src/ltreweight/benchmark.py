"""Ablation arms and the desk-scale synthetic benchmark."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import DataSettings, ModelSettings, RunConfig, parse_config
from .data import LabeledDataset, compute_imbalance_factor, ingest, synth_benchmark_splits
from .evaluation import confusion, epsilon_summary, top_k_error
from .models import ModelSpec, forward
from .seeding import derive_seed
from .trainer import TrainConfig, TrainResult, train

ARMS: dict[str, dict] = {
    "vanilla": {"mode": "vanilla"},
    "class_balanced": {"mode": "class_balanced"},
    "l2rw": {"mode": "l2rw", "l2rw_pretrain": False},
    "l2rw+pretrain": {"mode": "l2rw", "l2rw_pretrain": True},
    "l2rw+pretrain+two_component": {"mode": "l2rw", "l2rw_pretrain": True, "l2rw_two_component": True},
    "ours": {"mode": "ours"},
    "ours_learn_w": {"mode": "ours_learn_w"},
}

# the criterion-6 setting: vanilla balanced top-1 error lands around 30%
DESK_CONFIG = """
[data]
num_classes = 10
dims = 20
imbalance_factor = 100
base_count = 500
class_separation = 4.0
dev_per_class = 10
test_per_class = 200

[model]
kind = mlp
hidden = 32

[train]
loss = cross_entropy
lr = 0.05
meta_lr = 100
momentum = 0.9
batch_size = 100
stage1_epochs = 20
stage2_epochs = 20

[ablate]
arms = vanilla, class_balanced, ours
seeds = 0, 1, 2, 3, 4
imbalance_factors = 100
"""


def canonical_arm(name: str) -> str:
    key = name.strip().replace("-", "_").replace(" ", "")
    for arm in ARMS:
        if arm.replace("-", "_") == key:
            return arm
    raise ValueError(f"unknown arm {name!r}; expected one of {list(ARMS)}")


def arm_config(base: TrainConfig, arm: str) -> TrainConfig:
    return replace(base, **ARMS[canonical_arm(arm)])


def desk_config() -> RunConfig:
    return parse_config(DESK_CONFIG, source="<desk benchmark>")


SPLITS = ("train", "dev", "test")


def split_path(root, name: str, fmt: str) -> Path:
    """File name of one split inside a make-data directory."""
    root = Path(root)
    if fmt == "csv":
        return root / f"{name}.csv"
    if fmt == "cifar_binary":
        return root / f"{name}.bin"
    if fmt == "idx_images":
        return root / f"{name}-images.idx"
    raise ValueError(f"unknown data format {fmt!r}")


def shape_for_model(ds: LabeledDataset, kind: str) -> LabeledDataset:
    """Flatten features for an mlp; a small_cnn needs ``(H, W, C)`` images."""
    if kind == "mlp" and ds.features.ndim > 2:
        return LabeledDataset(ds.features.reshape(len(ds), -1), ds.labels, ds.num_classes)
    if kind == "small_cnn" and ds.features.ndim != 4:
        raise ValueError(f"small_cnn needs image data, got feature shape {ds.feature_shape}")
    return ds


def load_splits(settings: DataSettings, seed: int, imbalance_factor: float | None = None, model_kind: str = "mlp"):
    """``(train, dev, test)`` either from a make-data directory or freshly synthesized."""
    if settings.synthetic:
        data_seed = settings.data_seed if settings.data_seed is not None else seed
        return synth_benchmark_splits(
            settings.num_classes,
            settings.dims,
            imbalance_factor if imbalance_factor is not None else settings.imbalance_factor,
            settings.base_count,
            settings.class_separation,
            settings.dev_per_class,
            settings.test_per_class,
            derive_seed(data_seed, "data"),
        )
    if imbalance_factor is not None:
        raise ValueError("imbalance factor sweeps need synthetic data; prepare one data dir per factor instead")
    root = Path(settings.dir)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    as_images = model_kind == "small_cnn"
    splits = [ingest(split_path(root, name, settings.format), settings.format, as_images=as_images) for name in SPLITS]
    k = max(s.num_classes for s in splits)
    return tuple(shape_for_model(LabeledDataset(s.features, s.labels, k), model_kind) for s in splits)


def model_spec_for(settings: ModelSettings, train_set: LabeledDataset, seed: int) -> ModelSpec:
    return ModelSpec(
        kind=settings.kind,
        input_shape=train_set.feature_shape,
        num_classes=train_set.num_classes,
        hidden=settings.hidden,
        kernel_size=settings.kernel_size,
        seed=derive_seed(seed, "init"),
    )


@dataclass
class RunRecord:
    arm: str
    seed: int
    imbalance_factor: float
    top1: float
    top3: float
    top5: float
    min_total_weight: float
    confusion: np.ndarray
    eps_by_epoch: dict[int, np.ndarray]
    weight_sums: list[float]
    metrics: list[dict]
    train_counts: np.ndarray
    requested_if: float | None = None
    result: TrainResult | None = field(default=None, repr=False)
    spec: ModelSpec | None = field(default=None, repr=False)

    @property
    def final_eps(self) -> np.ndarray | None:
        if not self.eps_by_epoch:
            return None
        return self.eps_by_epoch[max(self.eps_by_epoch)]


def run_arm(run_cfg: RunConfig, arm: str, seed: int, imbalance_factor: float | None = None) -> RunRecord:
    train_set, dev_set, test_set = load_splits(run_cfg.data, seed, imbalance_factor, run_cfg.model.kind)
    cfg = arm_config(run_cfg.with_seed(seed).resolve(train_set.class_counts), arm)
    spec = model_spec_for(run_cfg.model, train_set, seed)
    result = train(spec, train_set, dev_set, cfg, test_set)
    logits, _ = forward(spec, result.theta, test_set.features, track=False)
    k = train_set.num_classes
    topk = {j: top_k_error(logits.data, test_set.labels, min(j, k)) for j in (1, 3, 5)}
    mtw = result.min_total_weight
    return RunRecord(
        arm=canonical_arm(arm),
        seed=seed,
        imbalance_factor=compute_imbalance_factor(train_set),
        top1=topk[1],
        top3=topk[3],
        top5=topk[5],
        min_total_weight=mtw if np.isfinite(mtw) else float("nan"),
        confusion=confusion(logits.data, test_set.labels, k),
        eps_by_epoch=epsilon_summary(result.state.eps_log, k),
        weight_sums=list(result.state.weight_sums),
        metrics=result.metrics,
        train_counts=train_set.class_counts,
        requested_if=imbalance_factor if imbalance_factor is not None else run_cfg.data.imbalance_factor,
        result=result,
        spec=spec,
    )
