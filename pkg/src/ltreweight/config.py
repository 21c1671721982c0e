"""INI-style run configuration.

Sections and keys (defaults in parentheses)::

    [data]
    dir = path/to/make-data/output        # or the synthetic keys below
    format = csv                          (csv)
    num_classes, dims, imbalance_factor, base_count, class_separation
    dev_per_class = 10                    (10)
    test_per_class = 100                  (100)
    data_seed = 0                         (the run seed)

    [model]
    kind = mlp | small_cnn                (mlp)
    hidden = 32                           comma separated
    kernel_size = 3

    [train]
    mode, loss, focal_gamma, ldam_max_margin, ldam_scale, lr, meta_lr,
    stage1_steps | stage1_epochs, stage2_steps | stage2_epochs,
    batch_size, dev_batch_size, momentum, lr_schedule = "step:mult, ...",
    schedule_unit = steps | epochs, beta, normalize_weights, seed,
    l2rw_pretrain, l2rw_two_component, stage2_class_weights,
    switch_at_first_decay, eval_every

    [ablate]
    arms = vanilla, class_balanced, ours
    seeds = 0, 1, 2
    imbalance_factors = 100

    [output]
    dir = runs/example

The ``LTRW_OUTPUT_DIR`` environment variable overrides ``[output] dir``.
"""
from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .losses import LossKind, cross_entropy, focal, ldam
from .trainer import MODES, TrainConfig

OUTPUT_ENV = "LTRW_OUTPUT_DIR"
SYNTH_KEYS = ("num_classes", "dims", "imbalance_factor", "base_count", "class_separation")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSettings:
    dir: str | None = None
    format: str = "csv"
    num_classes: int = 10
    dims: int = 20
    imbalance_factor: float = 100.0
    base_count: int = 500
    class_separation: float = 4.0
    dev_per_class: int = 10
    test_per_class: int = 100
    data_seed: int | None = None

    @property
    def synthetic(self) -> bool:
        return self.dir is None


@dataclass(frozen=True)
class ModelSettings:
    kind: str = "mlp"
    hidden: tuple[int, ...] = (32,)
    kernel_size: int = 3


@dataclass(frozen=True)
class AblateSettings:
    arms: tuple[str, ...] = ("vanilla", "class_balanced", "ours")
    seeds: tuple[int, ...] = (0,)
    imbalance_factors: tuple[float, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    data: DataSettings
    model: ModelSettings
    train: TrainConfig
    loss_name: str = "cross_entropy"
    loss_params: dict = field(default_factory=dict)
    stage1_epochs: float | None = None
    stage2_epochs: float | None = None
    schedule_unit: str = "steps"
    ablate: AblateSettings = field(default_factory=AblateSettings)
    output_dir: str | None = None
    text: str = ""

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:16]

    def with_seed(self, seed: int) -> RunConfig:
        return replace(self, train=replace(self.train, seed=int(seed)))

    def resolve(self, train_counts) -> TrainConfig:
        """Concrete TrainConfig for a training set with the given class counts.

        Converts epoch units to steps and builds LDAM margins from the counts.
        """
        counts = np.asarray(train_counts)
        n = int(counts.sum())
        steps_per_epoch = max(n // min(self.train.batch_size, n), 1)
        cfg = self.train
        updates: dict = {}
        if self.stage1_epochs is not None:
            updates["stage1_steps"] = int(round(self.stage1_epochs * steps_per_epoch))
        if self.stage2_epochs is not None:
            updates["stage2_steps"] = int(round(self.stage2_epochs * steps_per_epoch))
        if self.schedule_unit == "epochs":
            updates["lr_schedule"] = tuple((int(round(s * steps_per_epoch)), m) for s, m in cfg.lr_schedule)
        updates["loss"] = make_loss(self.loss_name, self.loss_params, counts)
        return replace(cfg, **updates)


def make_loss(name: str, params: dict, counts=None) -> LossKind:
    if name == "cross_entropy":
        return cross_entropy()
    if name == "focal":
        return focal(params.get("focal_gamma", 0.5))
    if name == "ldam":
        if counts is None:
            raise ConfigError("ldam loss needs training class counts")
        return ldam(np.maximum(counts, 1), params.get("ldam_max_margin"), params.get("ldam_scale", 30.0))
    raise ConfigError(f"unknown loss {name!r}; expected cross_entropy, focal or ldam")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(" ", "").split(",") if t)


def _words(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _schedule(text: str) -> tuple[tuple[float, float], ...]:
    out = []
    for item in _words(text):
        try:
            s, m = item.split(":")
            out.append((float(s), float(m)))
        except ValueError:
            raise ConfigError(f"[train] lr_schedule: cannot parse {item!r}; expected step:multiplier") from None
    return tuple(out)


def canonical_text(parser: configparser.ConfigParser) -> str:
    lines = []
    for section in sorted(parser.sections()):
        if section == "output":
            continue
        lines.append(f"[{section}]")
        for key in sorted(parser[section]):
            lines.append(f"{key} = {parser[section][key].strip()}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None

    missing: list[str] = []

    def get(section, key, conv=str, default=None, required=False):
        if parser.has_option(section, key):
            raw = parser.get(section, key)
            try:
                return conv(raw)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"[{section}] {key}: invalid value {raw!r} ({e})") from None
        if required:
            missing.append(f"[{section}] {key}")
        return default

    def flag(raw: str) -> bool:
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")

    if not parser.has_section("data"):
        missing.append("[data]")
    data_dir = get("data", "dir")
    synth = data_dir is None
    data = DataSettings(
        dir=data_dir,
        format=get("data", "format", str, "csv"),
        num_classes=get("data", "num_classes", int, 10, required=synth),
        dims=get("data", "dims", int, 20, required=synth),
        imbalance_factor=get("data", "imbalance_factor", float, 100.0, required=synth),
        base_count=get("data", "base_count", int, 500, required=synth),
        class_separation=get("data", "class_separation", float, 4.0, required=synth),
        dev_per_class=get("data", "dev_per_class", int, 10),
        test_per_class=get("data", "test_per_class", int, 100),
        data_seed=get("data", "data_seed", int, None),
    )
    model = ModelSettings(
        kind=get("model", "kind", str, "mlp"),
        hidden=get("model", "hidden", _ints, (32,)),
        kernel_size=get("model", "kernel_size", int, 3),
    )
    mode = get("train", "mode", str, "ours")
    if mode not in MODES:
        raise ConfigError(f"[train] mode: invalid mode {mode!r}; expected one of {MODES}")
    loss_name = get("train", "loss", str, "cross_entropy")
    loss_params = {}
    for key in ("focal_gamma", "ldam_max_margin", "ldam_scale"):
        v = get("train", key, float)
        if v is not None:
            loss_params[key] = v
    schedule_unit = get("train", "schedule_unit", str, "steps")
    if schedule_unit not in ("steps", "epochs"):
        raise ConfigError("[train] schedule_unit must be 'steps' or 'epochs'")
    stage1_epochs = get("train", "stage1_epochs", float)
    stage2_epochs = get("train", "stage2_epochs", float)
    stage1_steps = get("train", "stage1_steps", int, 0, required=stage1_epochs is None)
    stage2_steps = get("train", "stage2_steps", int, 0, required=stage2_epochs is None)
    lr = get("train", "lr", float, required=True)
    if missing:
        raise ConfigError(f"{source}: missing required keys: " + ", ".join(missing))
    schedule = get("train", "lr_schedule", _schedule, ())
    try:
        train = TrainConfig(
            lr=lr,
            meta_lr=get("train", "meta_lr", float, 1e-3),
            stage1_steps=stage1_steps,
            stage2_steps=stage2_steps,
            batch_size=get("train", "batch_size", int, 100),
            dev_batch_size=get("train", "dev_batch_size", int, None),
            momentum=get("train", "momentum", float, 0.9),
            lr_schedule=tuple((int(s) if schedule_unit == "steps" else s, m) for s, m in schedule),
            loss=cross_entropy(),
            mode=mode,
            beta=get("train", "beta", float, None),
            normalize_weights=get("train", "normalize_weights", flag, True),
            seed=get("train", "seed", int, 0),
            l2rw_pretrain=get("train", "l2rw_pretrain", flag, False),
            l2rw_two_component=get("train", "l2rw_two_component", flag, False),
            stage2_class_weights=get("train", "stage2_class_weights", flag, True),
            switch_at_first_decay=get("train", "switch_at_first_decay", flag, False),
            eval_every=get("train", "eval_every", int, 0),
        )
    except ValueError as e:
        raise ConfigError(f"[train] {e}") from None
    if schedule_unit == "epochs":
        # keep fractional epochs until resolve(); TrainConfig only checks ordering
        object.__setattr__(train, "lr_schedule", tuple(schedule))
    ablate = AblateSettings(
        arms=get("ablate", "arms", _words, AblateSettings.arms),
        seeds=get("ablate", "seeds", _ints, AblateSettings.seeds),
        imbalance_factors=get("ablate", "imbalance_factors", _floats, ()),
    )
    make_loss(loss_name, loss_params, np.ones(2))
    output_dir = os.environ.get(OUTPUT_ENV) or get("output", "dir", str, None)
    return RunConfig(
        data=data,
        model=model,
        train=train,
        loss_name=loss_name,
        loss_params=loss_params,
        stage1_epochs=stage1_epochs,
        stage2_epochs=stage2_epochs,
        schedule_unit=schedule_unit,
        ablate=ablate,
        output_dir=output_dir,
        text=canonical_text(parser),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), source=str(path))
