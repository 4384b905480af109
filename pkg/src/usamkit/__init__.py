"""Uncertainty quantification for promptable segmentation.

Sampling-based entropy estimators, lightweight MLP heads (USAM) that predict
IoUs and IoU gaps from model tokens, a correction-curve evaluation harness,
and a deterministic synthetic segmentation backend to exercise all of them.
"""
__version__ = "0.1.0"

from .backend import SyntheticBackend, SyntheticWorld, synthetic_sample_set
from .bayes import (
    MissingRecordsError,
    Record,
    SampleSet,
    best_head,
    epistemic_entropy,
    predictive_entropy,
    prompt_entropy,
    task_entropy,
    task_probs,
)
from .evaluation import SCENARIOS, ScoredSample, correction_curve, correlation_matrix, pearson
from .io import read_records, rle_decode, rle_encode, write_records
from .masks import binary_entropy, iou, mean_mask_entropy, threshold, weighted_mask_entropy
from .mlp import SigmoidMLPRegressor, TrainConfig, train
from .sampling import AugKind, ModelId, PointPrompt, SampleConfig, sample_prompt_points
from .usam import USAM, build_training_set

__all__ = [
    "AugKind", "MissingRecordsError", "ModelId", "PointPrompt", "Record", "SCENARIOS",
    "SampleConfig", "SampleSet", "ScoredSample", "SigmoidMLPRegressor", "SyntheticBackend",
    "SyntheticWorld", "TrainConfig", "USAM", "best_head", "binary_entropy", "build_training_set",
    "correction_curve", "correlation_matrix", "epistemic_entropy", "iou", "mean_mask_entropy",
    "pearson", "predictive_entropy", "prompt_entropy", "read_records", "rle_decode", "rle_encode",
    "sample_prompt_points", "synthetic_sample_set", "task_entropy", "task_probs", "threshold",
    "train", "weighted_mask_entropy", "write_records",
]
