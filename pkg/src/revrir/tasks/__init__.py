"""Downstream room fingerprinting: fine-tuning, the feature baseline, scoring."""

from .baseline import BaselineConfig, BaselineNet, baseline_train_eval, feature_matrix, scaled_widths
from .features import FEATURE_NAMES, N_FEATURES, band_edges, baseline_features, decay_rate
from .finetune import ClassifierHead, FinetuneConfig, FinetuneResult, embed, finetune, predict
from .metrics import ConfusionMatrix, collapse_to_types, confusion, scoreboard, top1_accuracy

__all__ = [
    "BaselineConfig",
    "BaselineNet",
    "ClassifierHead",
    "ConfusionMatrix",
    "FEATURE_NAMES",
    "FinetuneConfig",
    "FinetuneResult",
    "N_FEATURES",
    "band_edges",
    "baseline_features",
    "baseline_train_eval",
    "collapse_to_types",
    "confusion",
    "decay_rate",
    "embed",
    "feature_matrix",
    "finetune",
    "predict",
    "scaled_widths",
    "scoreboard",
    "top1_accuracy",
]
