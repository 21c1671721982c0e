"""Long-tailed classification with class-wise and meta-learned conditional example weights."""
from __future__ import annotations

__version__ = "0.1.0"

from .benchmark import ARMS, desk_config, run_arm
from .config import load_config, parse_config
from .data import LabeledDataset, make_long_tailed, retained_counts, synth_gaussian_longtail
from .evaluation import confusion, epsilon_summary, per_class_accuracy, top_k_error
from .losses import LossKind, cross_entropy, focal, ldam
from .models import Classifier, ModelSpec
from .trainer import TrainConfig, TrainResult, train
from .weighting import ClassWeights, effective_number_weights, meta_epsilon_gradient

__all__ = [
    "__version__",
    "ARMS",
    "desk_config",
    "run_arm",
    "load_config",
    "parse_config",
    "LabeledDataset",
    "make_long_tailed",
    "retained_counts",
    "synth_gaussian_longtail",
    "confusion",
    "epsilon_summary",
    "per_class_accuracy",
    "top_k_error",
    "LossKind",
    "cross_entropy",
    "focal",
    "ldam",
    "Classifier",
    "ModelSpec",
    "TrainConfig",
    "TrainResult",
    "train",
    "ClassWeights",
    "effective_number_weights",
    "meta_epsilon_gradient",
]
