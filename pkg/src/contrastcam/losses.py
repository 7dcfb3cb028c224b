"""Saliency-guided training objectives for binary CAM classifiers.

Every loss takes a :class:`~contrastcam.cam.ModelOutput` (single sample or
batch), integer labels, a human heatmap already aligned to the CAM grid and
a :class:`LossWeights`. They return the per-sample loss as a differentiable
tensor; :func:`batch_loss` reduces it to the mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .cam import (
    ModelOutput,
    SalienceMap,
    ValidationError,
    class_cams_tensor,
    difference_salience_tensor,
    normalize_unit_tensor,
)

VARIANTS = ("baseline", "difference", "per_class", "contrast", "cross_entropy_only")
SALIENCE_VARIANTS = ("baseline", "difference", "per_class", "contrast")
THREE_TERM = ("per_class", "contrast")


@dataclass(frozen=True)
class LossWeights:
    alpha: float
    beta: float
    gamma: float = 0.0
    variant: str = "baseline"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")
        weights = (self.alpha, self.beta, self.gamma)
        if any(not np.isfinite(w) or w < 0 for w in weights):
            raise ValidationError(f"loss weights must be finite and >= 0, got {weights}")
        if not any(w > 0 for w in weights):
            raise ValidationError("at least one loss weight must be positive")
        if self.variant not in THREE_TERM and self.gamma != 0:
            raise ValidationError(f"gamma must be 0 for the {self.variant} variant")

    @classmethod
    def default(cls, variant: str) -> "LossWeights":
        """Equal weighting: 0.5 each for two terms, 0.3 each for three."""
        if variant == "cross_entropy_only":
            return cls(1.0, 0.0, 0.0, variant)
        if variant in THREE_TERM:
            return cls(0.3, 0.3, 0.3, variant)
        return cls(0.5, 0.5, 0.0, variant)

    @property
    def uses_salience(self) -> bool:
        return self.variant in SALIENCE_VARIANTS


def mse_map(a, b):
    """Per-cell mean squared error between two maps.

    Accepts two :class:`SalienceMap` (returns a float) or two tensors whose
    trailing two dims are the grid (returns one value per leading index).
    """
    if isinstance(a, SalienceMap) or isinstance(b, SalienceMap):
        if not (isinstance(a, SalienceMap) and isinstance(b, SalienceMap)):
            raise ValidationError("mse_map needs two SalienceMaps or two tensors")
        if a.shape != b.shape:
            raise ValidationError(f"map shapes differ: {a.shape} vs {b.shape}")
        if not (a.normalized and b.normalized):
            raise ValidationError("mse_map compares normalized maps")
        return float(np.mean((a.values - b.values) ** 2))
    if a.shape[-2:] != b.shape[-2:]:
        raise ValidationError(f"map shapes differ: {tuple(a.shape[-2:])} vs {tuple(b.shape[-2:])}")
    return ((a - b) ** 2).mean(dim=(-2, -1))


def cross_entropy(output: ModelOutput, label) -> torch.Tensor:
    """-log p(label), via log-softmax."""
    label = _as_label_tensor(label, output.logits)
    logp = F.log_softmax(output.logits, dim=-1)
    return -logp.gather(-1, label.unsqueeze(-1)).squeeze(-1)


def _as_label_tensor(label, like: torch.Tensor) -> torch.Tensor:
    label = torch.as_tensor(label, dtype=torch.long, device=like.device)
    if label.shape != like.shape[:-1]:
        raise ValidationError(f"label shape {tuple(label.shape)} does not match batch {tuple(like.shape[:-1])}")
    if bool(((label != 0) & (label != 1)).any()):
        raise ValidationError("labels must be 0 or 1")
    return label


def _aligned_heatmap(h, output: ModelOutput) -> torch.Tensor:
    if isinstance(h, SalienceMap):
        if not h.normalized:
            raise ValidationError("human heatmap must be normalized")
        h = h.tensor(dtype=output.features.dtype)
    h = torch.as_tensor(h).to(dtype=output.features.dtype, device=output.features.device)
    expected = tuple(output.features.shape[:-3]) + output.grid_shape
    if tuple(h.shape) != expected:
        raise ValidationError(
            f"heatmap shape {tuple(h.shape)} is not aligned to the CAM grid {expected}; "
            "resize it with saliency_io.resize_to_grid first"
        )
    return h


def _true_false_cams(output: ModelOutput, label) -> tuple[torch.Tensor, torch.Tensor]:
    label = _as_label_tensor(label, output.logits)
    cams = class_cams_tensor(output)  # (..., 2, H, W)
    idx = label[..., None, None, None].expand(*label.shape, 1, *cams.shape[-2:])
    t = cams.gather(-3, idx).squeeze(-3)
    f = cams.gather(-3, 1 - idx).squeeze(-3)
    return t, f


def _check_variant(w: LossWeights, variant: str):
    if w.variant != variant:
        raise ValidationError(f"weights are configured for {w.variant!r}, not {variant!r}")


def loss_cross_entropy_only(output: ModelOutput, label, h, w: LossWeights) -> torch.Tensor:
    _check_variant(w, "cross_entropy_only")
    return w.alpha * cross_entropy(output, label)


def loss_baseline(output: ModelOutput, label, h, w: LossWeights) -> torch.Tensor:
    _check_variant(w, "baseline")
    h = _aligned_heatmap(h, output)
    t, _ = _true_false_cams(output, label)
    return w.alpha * cross_entropy(output, label) + w.beta * mse_map(h, normalize_unit_tensor(t))


def loss_difference(output: ModelOutput, label, h, w: LossWeights) -> torch.Tensor:
    _check_variant(w, "difference")
    h = _aligned_heatmap(h, output)
    t, f = _true_false_cams(output, label)
    d = difference_salience_tensor(t, f)
    return w.alpha * cross_entropy(output, label) + w.beta * mse_map(h, d)


def loss_per_class(output: ModelOutput, label, h, w: LossWeights) -> torch.Tensor:
    _check_variant(w, "per_class")
    h = _aligned_heatmap(h, output)
    t, f = _true_false_cams(output, label)
    return (
        w.alpha * cross_entropy(output, label)
        + w.beta * mse_map(h, normalize_unit_tensor(t))
        + w.gamma * mse_map(1 - h, normalize_unit_tensor(f))
    )


def loss_contrast(output: ModelOutput, label, h, w: LossWeights) -> torch.Tensor:
    """The false-class CAM chases the inverted true-class CAM.

    The target ``1 - t_norm`` is detached, so the gamma term only moves the
    false-class CAM; the true-class CAM answers to the human map alone.
    """
    _check_variant(w, "contrast")
    h = _aligned_heatmap(h, output)
    t, f = _true_false_cams(output, label)
    t_norm = normalize_unit_tensor(t)
    target = 1 - t_norm.detach()
    return (
        w.alpha * cross_entropy(output, label)
        + w.beta * mse_map(h, t_norm)
        + w.gamma * mse_map(target, normalize_unit_tensor(f))
    )


LOSSES = {
    "baseline": loss_baseline,
    "difference": loss_difference,
    "per_class": loss_per_class,
    "contrast": loss_contrast,
    "cross_entropy_only": loss_cross_entropy_only,
}


def sample_losses(output: ModelOutput, labels, h, w: LossWeights) -> torch.Tensor:
    return LOSSES[w.variant](output, labels, h, w)


def batch_loss(output: ModelOutput, labels, h, w: LossWeights) -> torch.Tensor:
    """Mean per-sample loss over a batched ``output``."""
    if output.logits.ndim != 2 or output.logits.shape[0] == 0:
        raise ValidationError("batch_loss needs a nonempty batch")
    return sample_losses(output, labels, h, w).mean()
