"""Human heatmap ingestion, inversion, grid alignment and edge-band maps."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .cam import SalienceMap, ValidationError, normalize_unit

HEATMAP_SOURCES = ("annotation", "eye_tracking", "synthetic_ground_truth", "fooling_edge")
DEFAULT_BAND_FRACTION = 0.1


@dataclass(frozen=True)
class HeatmapRecord:
    sample_id: str
    map: SalienceMap
    source: str = "annotation"

    def __post_init__(self):
        if not self.sample_id:
            raise ValidationError("sample_id must be nonempty")
        if not self.map.normalized:
            raise ValidationError(f"heatmap for {self.sample_id} is not normalized")
        if self.source not in HEATMAP_SOURCES:
            raise ValidationError(f"unknown heatmap source {self.source!r}")


def load_heatmap(path) -> SalienceMap:
    """Read an 8-bit grayscale image (v -> v/255) or a 2D ``.npy`` float array."""
    path = Path(path)
    try:
        if path.suffix == ".npy":
            arr = np.load(path, allow_pickle=False).astype(np.float64)
        else:
            with Image.open(path) as im:
                gray = np.asarray(im.convert("L"), dtype=np.float64)
            return SalienceMap(gray / 255.0, normalized=True)
    except (OSError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise OSError(f"cannot read heatmap {path}: {exc}") from exc
    if arr.ndim != 2:
        raise ValidationError(f"heatmap {path} is not 2D (shape {arr.shape})")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"heatmap {path} contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        return normalize_unit(SalienceMap(arr))
    return SalienceMap(arr, normalized=True)


def to_uint8(m: SalienceMap) -> np.ndarray:
    if not m.normalized:
        m = normalize_unit(m)
    return np.round(255.0 * m.values).astype(np.uint8)


def save_heatmap(m: SalienceMap, path) -> Path:
    """Write ``.npy`` (exact floats) or a grayscale PNG (round(255 v))."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".npy":
        np.save(path, np.array(m.values))
    else:
        Image.fromarray(to_uint8(m), mode="L").save(path)
    return path


def invert_map(h: SalienceMap) -> SalienceMap:
    if not h.normalized:
        raise ValidationError("only normalized maps can be inverted")
    return SalienceMap(1.0 - h.values, normalized=True)


def _resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = arr.shape
    if (in_h, in_w) == (out_h, out_w):
        return arr.copy()
    if in_h % out_h == 0 and in_w % out_w == 0:
        fh, fw = in_h // out_h, in_w // out_w
        return arr.reshape(out_h, fh, out_w, fw).mean(axis=(1, 3))
    t = torch.from_numpy(np.ascontiguousarray(arr))[None, None]
    out = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def resize_to_grid(m: SalienceMap, out_h: int, out_w: int) -> SalienceMap:
    """Block-average for integer downscales, bilinear otherwise; no renormalizing."""
    if out_h <= 0 or out_w <= 0:
        raise ValidationError(f"target grid must be positive, got {out_h}x{out_w}")
    out = _resize_array(np.array(m.values), out_h, out_w)
    if m.normalized:
        # bilinear weights sum to one but may round a hair past the bounds
        out = np.clip(out, 0.0, 1.0)
    return SalienceMap(out, normalized=m.normalized)


def resize_batch(maps: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Tensor counterpart of :func:`resize_to_grid` for ``(N, H, W)`` stacks."""
    in_h, in_w = maps.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return maps.clone()
    if in_h % out_h == 0 and in_w % out_w == 0:
        return F.avg_pool2d(maps[:, None], kernel_size=(in_h // out_h, in_w // out_w))[:, 0]
    out = F.interpolate(maps[:, None], size=(out_h, out_w), mode="bilinear", align_corners=False)
    return out[:, 0].clamp(0.0, 1.0)


def edge_band_width(height: int, width: int, band_fraction: float) -> int:
    if not 0.0 < band_fraction < 0.5:
        raise ValidationError(f"band_fraction must lie in (0, 0.5), got {band_fraction}")
    band = math.floor(band_fraction * min(height, width))
    if band < 1:
        raise ValidationError(
            f"band_fraction {band_fraction} on a {height}x{width} grid rounds to a zero-width band"
        )
    return band


def make_edge_map(height: int, width: int, band_fraction: float = DEFAULT_BAND_FRACTION) -> SalienceMap:
    """Ones within ``floor(band_fraction * min(height, width))`` cells of any border."""
    band = edge_band_width(height, width, band_fraction)
    arr = np.ones((height, width))
    arr[band:height - band, band:width - band] = 0.0
    return SalienceMap(arr, normalized=True)
