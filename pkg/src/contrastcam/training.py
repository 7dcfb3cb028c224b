"""Multi-seed saliency-guided training, checkpointing and passive fooling."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
import multiprocessing

import numpy as np
import torch
import torch.nn.functional as F
import yaml

from .cam import ValidationError
from .losses import VARIANTS, LossWeights, batch_loss
from .models import ARCHS, DENSENET_INPUT, CamNet, build_model
from .saliency_io import DEFAULT_BAND_FRACTION, make_edge_map, resize_batch

log = logging.getLogger(__name__)

WORKERS_ENV = "SALIENCE_NUM_WORKERS"
CHECKPOINT_FILE = "model.pt"
MANIFEST_FILE = "manifest.json"
LOSSES_FILE = "losses.json"


@dataclass
class TrainConfig:
    variant: str = "baseline"
    weights: LossWeights | None = None
    epochs: int = 50
    learning_rate: float = 0.002
    optimizer: str = "sgd"
    batch_size: int = 32
    seeds: list = field(default_factory=lambda: list(range(10)))
    model_arch: str = "densenet121_pretrained"
    fooling: bool = False
    fooling_band_fraction: float = DEFAULT_BAND_FRACTION
    dataset_root: str | None = None
    output_dir: str | None = None
    # not part of the core experiment description, but needed by the CLI
    test_root: str | None = None
    method_name: str | None = None
    pretrained_checkpoint: str | None = None
    model_options: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(variant=self.variant, **self.weights)
        if self.weights is None:
            if self.variant not in VARIANTS:
                raise ValidationError(f"unknown loss variant {self.variant!r}")
            self.weights = LossWeights.default(self.variant)
        if self.weights.variant != self.variant:
            raise ValidationError(
                f"weights are for variant {self.weights.variant!r} but config says {self.variant!r}"
            )
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if self.optimizer != "sgd":
            raise ValidationError("only plain SGD is supported (optimizer: sgd)")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValidationError("seeds must be a nonempty list of distinct integers")
        if self.model_arch not in ARCHS:
            raise ValidationError(f"unknown model_arch {self.model_arch!r}; expected one of {ARCHS}")
        if self.fooling and not self.weights.uses_salience:
            raise ValidationError("fooling needs a loss variant with a salience term")

    @classmethod
    def from_mapping(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_mapping(self) -> dict:
        out = dataclasses.asdict(self)
        out["weights"] = {k: out["weights"][k] for k in ("alpha", "beta", "gamma")}
        return out

    def fingerprint(self) -> str:
        """Hash of everything that affects training, output location excluded."""
        data = self.to_mapping()
        for key in ("output_dir", "seeds", "test_root", "method_name"):
            data.pop(key)
        blob = json.dumps(data, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def method(self) -> str:
        if self.method_name:
            return self.method_name
        return f"{self.variant}+fooling" if self.fooling else self.variant


def _set_dotted(data: dict, key: str, value):
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValidationError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = value


def _check_override_key(key: str):
    top, _, rest = key.partition(".")
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    if top not in names:
        raise ValidationError(f"override {key!r} names no config key")
    if top == "weights" and rest not in ("alpha", "beta", "gamma"):
        raise ValidationError(f"override {key!r}: weights has alpha, beta, gamma")
    if rest and top not in ("weights", "model_options", "synthetic"):
        raise ValidationError(f"override {key!r}: {top} is not a mapping")


def load_config(path=None, overrides=()) -> TrainConfig:
    """Read a YAML/JSON config and apply ``key.sub=value`` overrides."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: config must be a mapping")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValidationError(f"override {item!r} is not key=value")
        _check_override_key(key)
        value = yaml.safe_load(raw)
        if key.startswith("weights."):
            variant = data.get("variant", "baseline")
            if not isinstance(data.get("weights"), dict):
                d = LossWeights.default(variant)
                data["weights"] = {"alpha": d.alpha, "beta": d.beta, "gamma": d.gamma}
        _set_dotted(data, key, value)
    return TrainConfig.from_mapping(data)


@dataclass
class RunArtifacts:
    final_checkpoint: Path | None
    per_epoch_train_loss: list
    seed: int
    config_fingerprint: str
    per_step_loss: list = field(default_factory=list)
    train_accuracy: float = float("nan")
    model: CamNet | None = field(default=None, repr=False, compare=False)


class SweepError(RuntimeError):
    def __init__(self, message, completed):
        super().__init__(message)
        self.completed = completed


# -- data preparation ------------------------------------------------------


def stack_images(samples, arch: str) -> torch.Tensor:
    x = torch.from_numpy(np.stack([s.image for s in samples]))
    if arch == "densenet121_pretrained" and x.shape[-2:] != (DENSENET_INPUT, DENSENET_INPUT):
        x = F.interpolate(x, size=(DENSENET_INPUT, DENSENET_INPUT), mode="bilinear", align_corners=False)
    return x


def grid_shape(model: CamNet, x: torch.Tensor) -> tuple[int, int]:
    with torch.no_grad():
        return tuple(model.features(x[:1]).shape[-2:])


def target_maps(samples, config: TrainConfig, grid) -> torch.Tensor | None:
    """Per-sample heatmaps aligned to the CAM grid, or None when unused."""
    if not config.weights.uses_salience:
        return None
    if config.fooling:
        _, height, width = samples[0].image.shape
        edge = make_edge_map(height, width, config.fooling_band_fraction).tensor(torch.float64)
        maps = edge.expand(len(samples), height, width)
    else:
        missing = [s.sample_id for s in samples if s.human_map is None]
        if missing:
            raise ValidationError(
                f"variant {config.variant} needs human heatmaps; missing for {len(missing)} "
                f"samples (first: {missing[0]})"
            )
        shapes = {s.human_map.shape for s in samples}
        if len(shapes) == 1:
            maps = torch.from_numpy(np.stack([np.array(s.human_map.values) for s in samples]))
        else:
            maps = torch.cat(
                [resize_batch(s.human_map.tensor(torch.float64)[None], *grid) for s in samples]
            )
    return resize_batch(maps.contiguous(), *grid).float()


# -- training --------------------------------------------------------------


def _build(config: TrainConfig, seed: int, in_channels: int) -> CamNet:
    return build_model(
        config.model_arch,
        seed,
        in_channels=in_channels,
        pretrained_checkpoint=config.pretrained_checkpoint,
        **(config.model_options if config.model_arch == "tiny_cam_net" else {}),
    )


def predict_proba(model: CamNet, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    was_training = model.training
    model.eval()
    with torch.no_grad():
        probs = torch.cat([torch.softmax(model(x[i:i + batch_size]), dim=-1)[:, 1] for i in range(0, len(x), batch_size)])
    model.train(was_training)
    return probs


def train_one(config: TrainConfig, seed: int, dataset, loss_fn=None, output_dir=None) -> RunArtifacts:
    """Train one model with plain SGD for ``config.epochs`` full passes.

    ``loss_fn(output, labels, h, weights)`` defaults to :func:`batch_loss`;
    tests swap in a spy. ``output_dir`` (default ``config.output_dir /
    seed_<seed>``) receives the checkpoint; pass ``False`` to keep the run
    in memory only.
    """
    if not dataset:
        raise ValidationError("cannot train on an empty dataset")
    loss_fn = loss_fn or batch_loss
    x = stack_images(dataset, config.model_arch)
    y = torch.tensor([s.label for s in dataset], dtype=torch.long)
    model = _build(config, seed, in_channels=x.shape[1])
    h = target_maps(dataset, config, grid_shape(model, x))

    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=0.0, weight_decay=0.0)
    n = len(dataset)
    epoch_losses, step_losses = [], []
    model.train()
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            out = model.output(x[idx])
            loss = loss_fn(out, y[idx], None if h is None else h[idx], config.weights)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            value = loss.item()
            step_losses.append(value)
            total += value * len(idx)
        epoch_losses.append(total / n)
        log.debug("seed %d epoch %d loss %.6f", seed, epoch + 1, epoch_losses[-1])

    acc = float(((predict_proba(model, x) > 0.5).long() == y).float().mean())
    art = RunArtifacts(
        final_checkpoint=None,
        per_epoch_train_loss=epoch_losses,
        seed=seed,
        config_fingerprint=config.fingerprint(),
        per_step_loss=step_losses,
        train_accuracy=acc,
        model=model,
    )
    if output_dir is None and config.output_dir is not None:
        output_dir = Path(config.output_dir) / f"seed_{seed}"
    if output_dir:
        art.final_checkpoint = save_checkpoint(model, config, art, output_dir, in_channels=x.shape[1])
    return art


def save_checkpoint(model: CamNet, config: TrainConfig, art: RunArtifacts, out_dir, in_channels: int) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / CHECKPOINT_FILE
    torch.save(model.state_dict(), ckpt)
    manifest = {
        "arch": config.model_arch,
        "seed": art.seed,
        "variant": config.variant,
        "method": config.method,
        "fooling": config.fooling,
        "fingerprint": art.config_fingerprint,
        "in_channels": in_channels,
        "model_options": model.hparams,
        "config": config.to_mapping(),
    }
    (out_dir / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))
    losses = {"per_epoch": art.per_epoch_train_loss, "per_step": art.per_step_loss, "train_accuracy": art.train_accuracy}
    (out_dir / LOSSES_FILE).write_text(json.dumps(losses, indent=1))
    return ckpt


def load_checkpoint(path, arch: str | None = None) -> tuple[CamNet, dict]:
    """Rebuild a model from ``model.pt`` (or its directory) and its manifest."""
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    manifest_path = path.parent / MANIFEST_FILE
    if not path.is_file() or not manifest_path.is_file():
        raise ValidationError(f"no checkpoint/manifest pair at {path.parent}")
    manifest = json.loads(manifest_path.read_text())
    if arch is not None and arch != manifest["arch"]:
        raise ValidationError(f"checkpoint {path} is a {manifest['arch']}, expected {arch}")
    if manifest["arch"] == "tiny_cam_net":
        opts = dict(manifest["model_options"])
        opts.pop("in_channels", None)
        model = build_model("tiny_cam_net", manifest["seed"], in_channels=manifest["in_channels"], **opts)
    else:
        from .models import DenseNetCam

        model = DenseNetCam()
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    return model, manifest


# -- sweeps ----------------------------------------------------------------


def _worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValidationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def _sweep_job(config, seed, dataset):
    art = train_one(config, seed, dataset)
    art.model = None
    return art


def train_sweep(config: TrainConfig, dataset) -> list[RunArtifacts]:
    """One independent :func:`train_one` per seed, in seed order.

    ``SALIENCE_NUM_WORKERS`` > 1 runs seeds in separate processes.
    """
    workers = min(_worker_count(), len(config.seeds))
    results: dict[int, RunArtifacts] = {}
    try:
        if workers == 1:
            for seed in config.seeds:
                results[seed] = train_one(config, seed, dataset)
        else:
            ctx = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                futures = {seed: pool.submit(_sweep_job, copy.deepcopy(config), seed, dataset) for seed in config.seeds}
                for seed, fut in futures.items():
                    results[seed] = fut.result()
    except Exception as exc:
        done = sorted(results)
        raise SweepError(f"sweep aborted ({type(exc).__name__}: {exc}); completed seeds: {done}", done) from exc
    return [results[s] for s in config.seeds]
