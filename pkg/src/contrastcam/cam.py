"""Class activation maps, Difference Salience and unit-interval normalization.

Two layers live here. ``SalienceMap`` is the numpy-backed value type used for
I/O, evaluation and rendering. The ``*_tensor`` helpers operate on torch
tensors over the trailing two (spatial) dimensions and stay differentiable,
which is what the training losses build on.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

__all__ = [
    "ValidationError",
    "SalienceMap",
    "ModelOutput",
    "normalize_unit",
    "normalize_unit_tensor",
    "class_cams_tensor",
    "compute_class_cam",
    "compute_cam_pair",
    "difference_salience",
    "difference_salience_tensor",
]

# value returned for a constant map, where min-max scaling is undefined
CONSTANT_FILL = 0.5


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True)
class SalienceMap:
    """A 2D saliency grid, either a raw CAM or a [0, 1] heatmap."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"salience map must be 2D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("salience map contains non-finite values")
        if self.normalized and arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValidationError("normalized salience map has values outside [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.array(self.values), dtype=dtype)


@dataclass
class ModelOutput:
    """Everything a binary CAM classifier exposes for one sample or a batch.

    ``logits``/``biases`` end in a class axis of size 2; ``features`` is
    ``(..., channels, height, width)`` taken right before global average
    pooling; ``class_weights`` is ``(2, channels)``.
    """

    logits: torch.Tensor
    features: torch.Tensor
    class_weights: torch.Tensor
    biases: torch.Tensor
    probabilities: torch.Tensor = field(init=False)

    def __post_init__(self):
        if self.logits.shape[-1] != 2 or self.class_weights.shape[0] != 2:
            raise ValidationError("binary task expected: logits and weights need 2 classes")
        if self.features.ndim < 3:
            raise ValidationError("features must be (..., channels, height, width)")
        if self.class_weights.shape[-1] != self.features.shape[-3]:
            raise ValidationError(
                f"weight columns ({self.class_weights.shape[-1]}) do not match "
                f"feature channels ({self.features.shape[-3]})"
            )
        self.probabilities = torch.softmax(self.logits, dim=-1)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.features.shape[-2:])


def _check_finite(x: torch.Tensor):
    if not bool(torch.isfinite(x).all()):
        raise ValidationError("salience map contains non-finite values")


def normalize_unit_tensor(x: torch.Tensor) -> torch.Tensor:
    """Min-max scale each trailing (H, W) map of ``x`` into [0, 1].

    Gradients pass through min and max (subgradients at ties). Constant maps
    become ``CONSTANT_FILL`` everywhere.
    """
    _check_finite(x)
    lo = x.amin(dim=(-2, -1), keepdim=True)
    hi = x.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    flat = span == 0
    # keep the unused branch finite so torch.where does not leak NaN gradients
    safe = torch.where(flat, torch.ones_like(span), span)
    scaled = (x - lo) / safe
    return torch.where(flat, torch.full_like(scaled, CONSTANT_FILL), scaled)


def normalize_unit(m: SalienceMap) -> SalienceMap:
    lo, hi = m.values.min(), m.values.max()
    if hi == lo:
        return SalienceMap(np.full(m.shape, CONSTANT_FILL), normalized=True)
    return SalienceMap((m.values - lo) / (hi - lo), normalized=True)


def class_cams_tensor(output: ModelOutput) -> torch.Tensor:
    """Raw CAMs for both classes, shape ``(..., 2, H, W)``."""
    return torch.einsum("kc,...chw->...khw", output.class_weights, output.features)


def _check_class(index: int, what: str):
    if index not in (0, 1):
        raise ValidationError(f"{what} must be 0 or 1, got {index!r}")


def compute_class_cam(output: ModelOutput, class_index: int) -> SalienceMap:
    _check_class(class_index, "class_index")
    if output.features.ndim != 3:
        raise ValidationError("compute_class_cam expects a single-sample ModelOutput")
    cam = torch.einsum("c,chw->hw", output.class_weights[class_index], output.features)
    return SalienceMap(cam.detach().cpu().double().numpy())


def compute_cam_pair(output: ModelOutput, true_label: int) -> tuple[SalienceMap, SalienceMap]:
    """Return ``(true-class CAM, false-class CAM)`` for a binary label."""
    _check_class(true_label, "true_label")
    return compute_class_cam(output, true_label), compute_class_cam(output, 1 - true_label)


def difference_salience(t: SalienceMap, f: SalienceMap) -> SalienceMap:
    if t.normalized or f.normalized:
        raise ValidationError("difference salience needs raw CAMs, got a normalized map")
    if t.shape != f.shape:
        raise ValidationError(f"CAM shapes differ: {t.shape} vs {f.shape}")
    return normalize_unit(SalienceMap(t.values - f.values))


def difference_salience_tensor(t: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
    if t.shape != f.shape:
        raise ValidationError(f"CAM shapes differ: {tuple(t.shape)} vs {tuple(f.shape)}")
    return normalize_unit_tensor(t - f)
