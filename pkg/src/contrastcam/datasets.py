"""On-disk binary classification datasets and a synthetic generator.

Layout::

    root/labels.csv          sample_id,label,subset
    root/images/<id>.png     8-bit, 1 or 3 channels
    root/heatmaps/<id>.png   optional 8-bit grayscale (or <id>.npy)
    root/metadata.json       optional per-sample generator metadata
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .cam import SalienceMap, ValidationError
from .saliency_io import load_heatmap, save_heatmap

MANIFEST = "labels.csv"
MANIFEST_HEADER = ["sample_id", "label", "subset"]
SHIFT_MODES = ("none", "relocate_patch", "new_texture")


@dataclass
class LabeledSample:
    sample_id: str
    image: np.ndarray  # (channels, H, W) float32 in [0, 1]
    label: int
    human_map: SalienceMap | None = None
    subset: str = "all"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sample_id:
            raise ValidationError("sample_id must be nonempty")
        if self.label not in (0, 1):
            raise ValidationError(f"{self.sample_id}: label must be 0 or 1, got {self.label!r}")
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim == 2:
            img = img[None]
        if img.ndim != 3 or img.shape[0] not in (1, 3):
            raise ValidationError(f"{self.sample_id}: image must be (1|3, H, W), got {img.shape}")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ValidationError(f"{self.sample_id}: image values must lie in [0, 1]")
        self.image = img
        if self.human_map is not None:
            if not self.human_map.normalized:
                raise ValidationError(f"{self.sample_id}: heatmap must be normalized")
            hh, hw = self.human_map.shape
            ih, iw = img.shape[1:]
            if hh * iw != hw * ih:
                raise ValidationError(
                    f"{self.sample_id}: heatmap {hh}x{hw} does not match image aspect {ih}x{iw}"
                )


def image_from_uint8(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, -1, 0)
    return arr.astype(np.float32) / np.float32(255.0)


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    arr = np.round(np.asarray(image, dtype=np.float64) * 255.0).astype(np.uint8)
    return arr[0] if arr.shape[0] == 1 else np.moveaxis(arr, 0, -1)


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
        return image_from_uint8(np.asarray(im))


def load_dataset(root) -> list[LabeledSample]:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise ValidationError(f"no {MANIFEST} manifest under {root}")
    meta_path = root / "metadata.json"
    meta = json.loads(meta_path.read_text())["samples"] if meta_path.is_file() else {}

    with manifest.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = set(MANIFEST_HEADER) - set(reader.fieldnames)
        if missing:
            raise ValidationError(f"{manifest} lacks columns {sorted(missing)}")
        rows = list(reader)

    samples = []
    seen = set()
    for row in sorted(rows, key=lambda r: r["sample_id"]):
        sid = row["sample_id"]
        if sid in seen:
            raise ValidationError(f"duplicate sample_id {sid}")
        seen.add(sid)
        try:
            label = int(row["label"])
        except ValueError:
            raise ValidationError(f"{sid}: label {row['label']!r} is not an integer") from None
        if label not in (0, 1):
            raise ValidationError(f"{sid}: label must be 0 or 1, got {label}")
        image_path = root / "images" / f"{sid}.png"
        if not image_path.is_file():
            raise ValidationError(f"{sid}: missing image {image_path}")
        human_map = None
        for suffix in (".png", ".npy"):
            hpath = root / "heatmaps" / f"{sid}{suffix}"
            if hpath.is_file():
                human_map = load_heatmap(hpath)
                break
        samples.append(
            LabeledSample(
                sample_id=sid,
                image=_read_image(image_path),
                label=label,
                human_map=human_map,
                subset=row["subset"],
                meta=meta.get(sid, {}),
            )
        )
    return samples


def save_dataset(samples, root, extra_meta: dict | None = None) -> Path:
    """Write ``samples`` in the on-disk layout (images quantized to 8 bits)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with (root / MANIFEST).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for s in samples:
            writer.writerow([s.sample_id, s.label, s.subset])
    for s in samples:
        mode = "L" if s.image.shape[0] == 1 else "RGB"
        Image.fromarray(image_to_uint8(s.image), mode=mode).save(root / "images" / f"{s.sample_id}.png")
        if s.human_map is not None:
            save_heatmap(s.human_map, root / "heatmaps" / f"{s.sample_id}.png")
    meta = {"samples": {s.sample_id: s.meta for s in samples if s.meta}}
    if extra_meta:
        meta.update(extra_meta)
    (root / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return root


# -- synthetic task ---------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale task: class 1 carries a checkerboard patch, class 0 does not.

    ``texture_period`` is the checker cell size in pixels for the training
    distribution; ``shifted_texture_period`` replaces it under
    ``shift_mode="new_texture"``. Under ``relocate_patch`` the patch moves
    from the left half of the image to the right half.

    ``distractor_class_bias`` plants a background shortcut: with ``shift_mode
    "none"`` each distractor blob is bright with probability
    ``(1 + bias) / 2`` in class 1 and ``(1 - bias) / 2`` in class 0. Shifted
    sets always draw polarity independently of the class.
    """

    image_size: int = 32
    patch_size: int = 8
    texture_period: int = 1
    shifted_texture_period: int = 2
    texture_contrast: float = 0.5
    shifted_texture_contrast: float | None = None
    noise_std: float = 0.1
    distractor_count: int = 3
    distractor_sigma: float = 2.0
    distractor_amplitude: float = 0.3
    distractor_class_bias: float = 0.0
    margin: int = 4
    shift_mode: str = "none"

    def __post_init__(self):
        if self.shift_mode not in SHIFT_MODES:
            raise ValidationError(f"unknown shift_mode {self.shift_mode!r}; expected one of {SHIFT_MODES}")
        if not 0 < self.patch_size < self.image_size:
            raise ValidationError("patch_size must be positive and smaller than image_size")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        if self.texture_period < 1 or self.shifted_texture_period < 1:
            raise ValidationError("texture periods must be >= 1")
        if not 0.0 <= self.distractor_class_bias <= 1.0:
            raise ValidationError("distractor_class_bias must lie in [0, 1]")
        if self.margin < 0 or self.distractor_count < 0:
            raise ValidationError("margin and distractor_count must be >= 0")
        if self.patch_size + 2 * self.margin > self.image_size:
            raise ValidationError(
                f"a {self.patch_size}px patch with {self.margin}px margins exceeds the "
                f"{self.image_size}px image"
            )

    @property
    def active_period(self) -> int:
        return self.shifted_texture_period if self.shift_mode == "new_texture" else self.texture_period

    @property
    def active_contrast(self) -> float:
        if self.shift_mode == "new_texture" and self.shifted_texture_contrast is not None:
            return self.shifted_texture_contrast
        return self.texture_contrast

    def location_range(self) -> tuple[tuple[int, int], tuple[int, int]]:
        """Inclusive ranges of the patch's top-left (row, col)."""
        lo = self.margin
        hi = self.image_size - self.margin - self.patch_size
        mid = (lo + hi) // 2
        cols = (mid + 1, hi) if self.shift_mode == "relocate_patch" else (lo, mid)
        if cols[0] > cols[1]:
            cols = (lo, hi)
        return (lo, hi), cols


def checkerboard(size: int, period: int, phase: tuple[int, int] = (0, 0)) -> np.ndarray:
    """A +-1 checkerboard with square cells of ``period`` pixels."""
    r = (np.arange(size)[:, None] + phase[0]) // period
    c = (np.arange(size)[None, :] + phase[1]) // period
    return np.where((r + c) % 2 == 0, 1.0, -1.0)


def _draw_sample(spec: SyntheticSpec, label: int, rng: np.random.Generator):
    n, p = spec.image_size, spec.patch_size
    img = np.full((n, n), 0.5)
    img += rng.normal(0.0, spec.noise_std, size=(n, n)) if spec.noise_std > 0 else 0.0
    yy, xx = np.mgrid[0:n, 0:n]
    blobs = []
    bias = spec.distractor_class_bias if spec.shift_mode == "none" else 0.0
    p_bright = 0.5 * (1 + bias) if label == 1 else 0.5 * (1 - bias)
    for _ in range(spec.distractor_count):
        cy, cx = rng.uniform(0, n, size=2)
        amp = spec.distractor_amplitude * (1.0 if rng.uniform() < p_bright else -1.0)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * spec.distractor_sigma**2))
        blobs.append([float(cy), float(cx), float(amp)])
    (r_lo, r_hi), (c_lo, c_hi) = spec.location_range()
    row = int(rng.integers(r_lo, r_hi + 1))
    col = int(rng.integers(c_lo, c_hi + 1))
    period = spec.active_period
    phase = tuple(int(v) for v in rng.integers(0, 2 * period, size=2))
    if label == 1:
        tex = checkerboard(p, period, phase)
        img[row:row + p, col:col + p] += 0.5 * spec.active_contrast * tex
    mask = np.zeros((n, n))
    mask[row:row + p, col:col + p] = 1.0
    quantized = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    meta = {
        "patch_row": row,
        "patch_col": col,
        "patch_size": p,
        "texture_period": period if label == 1 else None,
        "texture_contrast": spec.active_contrast if label == 1 else None,
        "texture_phase": list(phase) if label == 1 else None,
        "shift_mode": spec.shift_mode,
        "distractors": blobs,
    }
    return image_from_uint8(quantized), mask, meta


def generate_synthetic(
    spec: SyntheticSpec,
    count_per_class: int,
    seed: int,
    root=None,
    id_prefix: str | None = None,
    subset: str | None = None,
) -> list[LabeledSample]:
    """Build a balanced synthetic dataset; also write it to ``root`` if given.

    Each sample's heatmap is its ground-truth mask: the patch for class 1,
    an equally sized control region drawn from the same location
    distribution for class 0.
    """
    if count_per_class < 1:
        raise ValidationError("count_per_class must be >= 1")
    rng = np.random.default_rng([seed, SHIFT_MODES.index(spec.shift_mode)])
    prefix = id_prefix if id_prefix is not None else f"{spec.shift_mode}-s{seed}-"
    tag = subset if subset is not None else spec.shift_mode
    samples = []
    for i in range(2 * count_per_class):
        label = i % 2
        image, mask, meta = _draw_sample(spec, label, rng)
        samples.append(
            LabeledSample(
                sample_id=f"{prefix}{i:05d}",
                image=image,
                label=label,
                human_map=SalienceMap(mask, normalized=True),
                subset=tag,
                meta=meta,
            )
        )
    if root is not None:
        save_dataset(samples, root, {"spec": asdict(spec), "seed": seed})
    return samples
