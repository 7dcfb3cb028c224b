"""Contrastive saliency-guided training for binary CAM classifiers."""
from .cam import (
    ModelOutput,
    SalienceMap,
    ValidationError,
    compute_cam_pair,
    compute_class_cam,
    difference_salience,
    normalize_unit,
)
from .evaluation import AggregateCell, RunResult, aggregate, auroc, cam_alignment, subset_report
from .losses import LossWeights, batch_loss, mse_map

__version__ = "0.1.0"
