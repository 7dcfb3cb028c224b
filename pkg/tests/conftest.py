import numpy as np
import pytest
import torch

from contrastcam.cam import ModelOutput
from contrastcam.models import TinyCamNet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_output(rng, channels=3, h=4, w=5, batch=None, identical_rows=False):
    shape = (channels, h, w) if batch is None else (batch, channels, h, w)
    feats = torch.from_numpy(rng.normal(size=shape))
    weights = torch.from_numpy(rng.normal(size=(2, channels)))
    if identical_rows:
        weights[1] = weights[0]
    biases = torch.from_numpy(rng.normal(size=2))
    logits = feats.mean(dim=(-2, -1)) @ weights.T + biases
    return ModelOutput(logits=logits, features=feats, class_weights=weights, biases=biases)


@pytest.fixture
def tiny_double():
    torch.manual_seed(0)
    return TinyCamNet(in_channels=1, width=2, depth=2, pools=1).double()
