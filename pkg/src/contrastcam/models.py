"""CAM-capable binary classifiers: a tiny CNN and a DenseNet-121 wrapper.

Both end in ``features -> global average pool -> Linear(channels, 2)`` so
that a class's CAM averaged over the grid equals its logit minus its bias.
"""
from __future__ import annotations

import os
import re
from pathlib import Path

import torch
from torch import nn

from .cam import ModelOutput, ValidationError

ARCHS = ("tiny_cam_net", "densenet121_pretrained")
PRETRAINED_ENV = "CONTRASTCAM_DENSENET121_WEIGHTS"
DENSENET_INPUT = 224
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_FETCH_HINT = (
    "DenseNet-121 needs ImageNet weights on disk. Fetch them once with\n"
    "  python -c \"import torchvision; torchvision.models.densenet121(weights='IMAGENET1K_V1')\"\n"
    "and point the config key `pretrained_checkpoint` (or ${env}) at the cached "
    "densenet121-*.pth file (usually under ~/.cache/torch/hub/checkpoints/)."
)


class CamNet(nn.Module):
    """Base: subclasses provide ``features(x)`` and a 2-way ``classifier``."""

    def forward(self, x):
        return self.classifier(self.features(x).mean(dim=(-2, -1)))

    def output(self, x) -> ModelOutput:
        feats = self.features(x)
        logits = self.classifier(feats.mean(dim=(-2, -1)))
        return ModelOutput(
            logits=logits,
            features=feats,
            class_weights=self.classifier.weight,
            biases=self.classifier.bias,
        )


class TinyCamNet(CamNet):
    """conv3x3 stages (max-pooled after the first ``pools``), GAP, 2-way head.

    Inputs in [0, 1] are centred at 0.5 before the first convolution.
    """

    def __init__(self, in_channels=1, width=16, depth=3, pools=2, activation="relu"):
        super().__init__()
        act = {"relu": nn.ReLU, "softplus": nn.Softplus, "tanh": nn.Tanh}[activation]
        layers = []
        ch = in_channels
        for i in range(depth):
            layers += [nn.Conv2d(ch, width, kernel_size=3, padding=1), act()]
            if i < pools:
                layers.append(nn.MaxPool2d(2))
            ch = width
        self.trunk = nn.Sequential(*layers)
        self.classifier = nn.Linear(width, 2)
        self.hparams = dict(in_channels=in_channels, width=width, depth=depth, pools=pools, activation=activation)

    def features(self, x):
        return self.trunk((x - 0.5) / 0.25)


class DenseNetCam(CamNet):
    """torchvision DenseNet-121 trunk with a fresh 2-class head."""

    def __init__(self, state_dict=None):
        super().__init__()
        from torchvision.models import densenet121

        net = densenet121(weights=None)
        if state_dict is not None:
            net.load_state_dict(state_dict)
        self.trunk = net.features
        self.classifier = nn.Linear(net.classifier.in_features, 2)
        self.hparams = {}
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(3, 1, 1), persistent=False)

    def features(self, x):
        if x.shape[-3] == 1:
            x = x.expand(*x.shape[:-3], 3, *x.shape[-2:])
        return torch.relu(self.trunk((x - self.mean) / self.std))


def _load_pretrained(checkpoint):
    path = checkpoint or os.environ.get(PRETRAINED_ENV)
    if path:
        path = Path(path).expanduser()
    if not path or not path.is_file():
        where = f" (looked for {path})" if path else ""
        raise FileNotFoundError(
            f"missing DenseNet-121 ImageNet checkpoint{where}.\n" + _FETCH_HINT.format(env=PRETRAINED_ENV)
        )
    state = torch.load(path, map_location="cpu", weights_only=True)
    # legacy torchvision checkpoints use dotted names like "norm.1"
    pattern = re.compile(r"^(.*denselayer\d+\.(?:norm|relu|conv))\.((?:[12])\.(?:weight|bias|running_mean|running_var))$")
    fixed = {}
    for key, value in state.items():
        m = pattern.match(key)
        fixed[m.group(1) + m.group(2) if m else key] = value
    return fixed


def build_model(arch: str, seed: int, in_channels: int = 1, pretrained_checkpoint=None, **kwargs) -> CamNet:
    """Construct ``arch`` with its head initialized from ``seed``."""
    if arch not in ARCHS:
        raise ValidationError(f"unknown model_arch {arch!r}; expected one of {ARCHS}")
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        if arch == "tiny_cam_net":
            return TinyCamNet(in_channels=in_channels, **kwargs)
        return DenseNetCam(_load_pretrained(pretrained_checkpoint))
    finally:
        torch.random.set_rng_state(gen_state)
