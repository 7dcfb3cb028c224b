"""CAM grids: input | true-class CAM | false-class CAM | Difference Salience."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .cam import SalienceMap, compute_cam_pair, difference_salience, normalize_unit

# fixed anchors: 0 -> blue, 0.5 -> white, 1 -> red
_ANCHORS = np.array([[0.0, 0.0, 255.0], [255.0, 255.0, 255.0], [255.0, 0.0, 0.0]])
PANEL_GAP = 2
PANELS = ("input", "true-class CAM", "false-class CAM", "Difference Salience")


def colorize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to uint8 RGB on the blue-white-red scale."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    lower = v <= 0.5
    frac = np.where(lower, v / 0.5, (v - 0.5) / 0.5)[..., None]
    lo = np.where(lower[..., None], _ANCHORS[0], _ANCHORS[1])
    hi = np.where(lower[..., None], _ANCHORS[1], _ANCHORS[2])
    return np.round(lo + frac * (hi - lo)).astype(np.uint8)


def upsample(m: SalienceMap, height: int, width: int) -> np.ndarray:
    t = torch.from_numpy(np.array(m.values))[None, None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def _image_rgb(image: np.ndarray) -> np.ndarray:
    arr = np.round(np.asarray(image, dtype=np.float64) * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    return np.moveaxis(arr, 0, -1)


def sample_panels(model, sample, arch: str = "tiny_cam_net") -> list[np.ndarray]:
    """The four RGB panels for one sample, all at image resolution."""
    from .training import stack_images

    x = stack_images([sample], arch)
    with torch.no_grad():
        out = model.output(x)
    single = type(out)(
        logits=out.logits[0], features=out.features[0],
        class_weights=out.class_weights, biases=out.biases,
    )
    t, f = compute_cam_pair(single, sample.label)
    d = difference_salience(t, f)
    _, height, width = sample.image.shape
    panels = [_image_rgb(sample.image)]
    for m in (normalize_unit(t), normalize_unit(f), d):
        panels.append(colorize(upsample(m, height, width)))
    return panels


def render_grid(model, samples, out_path, arch: str = "tiny_cam_net", scale: int = 1) -> Path:
    """One row of four panels per sample, written as PNG.

    ``scale`` enlarges the finished grid by pixel replication.
    """
    model.eval()
    rows = [sample_panels(model, s, arch) for s in samples]
    ph = max(p.shape[0] for r in rows for p in r)
    pw = max(p.shape[1] for r in rows for p in r)
    n_cols = len(PANELS)
    canvas = np.full(
        (len(rows) * ph + (len(rows) - 1) * PANEL_GAP, n_cols * pw + (n_cols - 1) * PANEL_GAP, 3),
        255, dtype=np.uint8,
    )
    for i, row in enumerate(rows):
        for j, panel in enumerate(row):
            y, x = i * (ph + PANEL_GAP), j * (pw + PANEL_GAP)
            canvas[y:y + panel.shape[0], x:x + panel.shape[1]] = panel
    if scale > 1:
        canvas = canvas.repeat(scale, axis=0).repeat(scale, axis=1)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas, mode="RGB").save(out_path, optimize=False)
    return out_path
