import math

import numpy as np
import pytest
import torch

from contrastcam.cam import ModelOutput, SalienceMap, ValidationError
from contrastcam.losses import (
    LossWeights,
    batch_loss,
    cross_entropy,
    loss_baseline,
    loss_contrast,
    loss_difference,
    loss_per_class,
    mse_map,
    sample_losses,
)

from conftest import random_output


# -- scalar oracle: plain python loops, no torch ----------------------------


def _cam(feats, w_row):
    c, h, w = feats.shape
    return [[sum(w_row[j] * feats[j][y][x] for j in range(c)) for x in range(w)] for y in range(h)]


def _norm(m):
    flat = [v for row in m for v in row]
    lo, hi = min(flat), max(flat)
    if hi == lo:
        return [[0.5] * len(m[0]) for _ in m]
    return [[(v - lo) / (hi - lo) for v in row] for row in m]


def _mse(a, b):
    cells = [(x - y) ** 2 for ra, rb in zip(a, b) for x, y in zip(ra, rb)]
    return sum(cells) / len(cells)


def _ce(logits, label):
    m = max(logits)
    lse = m + math.log(sum(math.exp(v - m) for v in logits))
    return lse - logits[label]


def oracle_loss(out: ModelOutput, label, h, w: LossWeights):
    feats = out.features.tolist()
    weights = out.class_weights.tolist()
    logits = out.logits.tolist()
    t = _cam(np.array(feats), weights[label])
    f = _cam(np.array(feats), weights[1 - label])
    h = h.tolist()
    total = w.alpha * _ce(logits, label)
    if w.variant == "baseline":
        total += w.beta * _mse(h, _norm(t))
    elif w.variant == "difference":
        d = [[a - b for a, b in zip(rt, rf)] for rt, rf in zip(t, f)]
        total += w.beta * _mse(h, _norm(d))
    elif w.variant == "per_class":
        inv = [[1 - v for v in row] for row in h]
        total += w.beta * _mse(h, _norm(t)) + w.gamma * _mse(inv, _norm(f))
    elif w.variant == "contrast":
        tn = _norm(t)
        inv_t = [[1 - v for v in row] for row in tn]
        total += w.beta * _mse(h, tn) + w.gamma * _mse(inv_t, _norm(f))
    return total


# -- LossWeights -------------------------------------------------------------


def test_default_weights_match_equal_weighting():
    assert LossWeights.default("baseline") == LossWeights(0.5, 0.5, 0.0, "baseline")
    assert LossWeights.default("difference") == LossWeights(0.5, 0.5, 0.0, "difference")
    assert LossWeights.default("per_class") == LossWeights(0.3, 0.3, 0.3, "per_class")
    assert LossWeights.default("contrast") == LossWeights(0.3, 0.3, 0.3, "contrast")


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(alpha=-1, beta=1),
        dict(alpha=0, beta=0, gamma=0, variant="per_class"),
        dict(alpha=1, beta=1, gamma=0.5, variant="baseline"),
        dict(alpha=1, beta=1, variant="nope"),
        dict(alpha=float("nan"), beta=1),
    ],
)
def test_invalid_weights(kwargs):
    with pytest.raises(ValidationError):
        LossWeights(**kwargs)


# -- mse_map -----------------------------------------------------------------


class TestMseMap:
    def test_identity(self, rng):
        a = SalienceMap(rng.uniform(size=(4, 4)), normalized=True)
        assert mse_map(a, a) == 0.0

    def test_maximal_difference(self):
        assert mse_map(SalienceMap(np.ones((3, 3)), True), SalienceMap(np.zeros((3, 3)), True)) == 1.0

    def test_matches_elementwise_oracle(self, rng):
        for _ in range(50):
            a, b = rng.uniform(size=(7, 7)), rng.uniform(size=(7, 7))
            expected = sum((a[i, j] - b[i, j]) ** 2 for i in range(7) for j in range(7)) / 49
            got = mse_map(SalienceMap(a, True), SalienceMap(b, True))
            assert got == pytest.approx(expected, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            mse_map(SalienceMap(np.zeros((2, 2)), True), SalienceMap(np.zeros((3, 2)), True))

    def test_tensor_form(self, rng):
        a = torch.from_numpy(rng.uniform(size=(5, 3, 3)))
        b = torch.from_numpy(rng.uniform(size=(5, 3, 3)))
        np.testing.assert_allclose(mse_map(a, b).numpy(), ((a - b) ** 2).mean(dim=(1, 2)).numpy())


# -- per-variant losses ------------------------------------------------------

LOSS_FNS = {
    "baseline": loss_baseline,
    "difference": loss_difference,
    "per_class": loss_per_class,
    "contrast": loss_contrast,
}


@pytest.mark.parametrize("variant", list(LOSS_FNS))
def test_matches_scalar_oracle(variant, rng):
    for _ in range(20):
        out = random_output(rng, channels=3, h=4, w=4)
        label = int(rng.integers(0, 2))
        h = torch.from_numpy(rng.uniform(size=(4, 4)))
        w = LossWeights(*rng.uniform(0.1, 1.0, size=3), variant=variant) if variant in ("per_class", "contrast") \
            else LossWeights(*rng.uniform(0.1, 1.0, size=2), variant=variant)
        got = LOSS_FNS[variant](out, label, h, w).item()
        assert got == pytest.approx(oracle_loss(out, label, h, w), abs=1e-6)


def test_baseline_zero_salience_term(rng):
    out = random_output(rng)
    t = out.class_weights[1] @ out.features.reshape(3, -1)
    t_norm = ((t - t.min()) / (t.max() - t.min())).reshape(4, 5)
    w = LossWeights.default("baseline")
    loss = loss_baseline(out, 1, t_norm, w).item()
    assert loss == pytest.approx(w.alpha * cross_entropy(out, 1).item(), abs=1e-12)


def test_difference_zero_salience_term(rng):
    out = random_output(rng)
    d = (out.class_weights[0] - out.class_weights[1]) @ out.features.reshape(3, -1)
    d_norm = ((d - d.min()) / (d.max() - d.min())).reshape(4, 5)
    w = LossWeights.default("difference")
    assert loss_difference(out, 0, d_norm, w).item() == pytest.approx(w.alpha * cross_entropy(out, 0).item(), abs=1e-12)


def test_difference_degenerate_constant_case(rng):
    out = random_output(rng, identical_rows=True)
    w = LossWeights.default("difference")
    h = torch.full((4, 5), 0.5, dtype=torch.float64)
    assert loss_difference(out, 1, h, w).item() == pytest.approx(w.alpha * cross_entropy(out, 1).item(), abs=1e-15)


def test_per_class_both_terms_zero():
    # t_norm = h and f_norm = 1 - h when the false-class row is the negated true-class row
    feats = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]], dtype=torch.float64)
    weights = torch.tensor([[1.0], [-1.0]], dtype=torch.float64)
    logits = feats.mean(dim=(-2, -1)) @ weights.T
    out = ModelOutput(logits, feats, weights, torch.zeros(2, dtype=torch.float64))
    h = torch.tensor([[0.0, 1 / 3], [2 / 3, 1.0]], dtype=torch.float64)
    w = LossWeights.default("per_class")
    assert loss_per_class(out, 0, h, w).item() == pytest.approx(w.alpha * cross_entropy(out, 0).item(), abs=1e-12)


def test_contrast_both_terms_zero():
    feats = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]], dtype=torch.float64)
    weights = torch.tensor([[-2.0], [1.0]], dtype=torch.float64)
    logits = feats.mean(dim=(-2, -1)) @ weights.T
    out = ModelOutput(logits, feats, weights, torch.zeros(2, dtype=torch.float64))
    h = torch.tensor([[0.0, 1 / 3], [2 / 3, 1.0]], dtype=torch.float64)
    w = LossWeights.default("contrast")
    assert loss_contrast(out, 1, h, w).item() == pytest.approx(w.alpha * cross_entropy(out, 1).item(), abs=1e-12)


def test_contrast_with_zero_gamma_equals_baseline(rng):
    for _ in range(10):
        out = random_output(rng)
        h = torch.from_numpy(rng.uniform(size=(4, 5)))
        a = loss_contrast(out, 0, h, LossWeights(0.4, 0.6, 0.0, "contrast")).item()
        b = loss_baseline(out, 0, h, LossWeights(0.4, 0.6, 0.0, "baseline")).item()
        assert a == b


def test_contrast_target_is_detached(rng):
    out = random_output(rng)
    out.class_weights.requires_grad_(True)
    h = torch.from_numpy(rng.uniform(size=(4, 5)))
    # only the gamma term: its gradient must not reach the true-class (label 0) row
    loss_contrast(out, 0, h, LossWeights(0.0, 0.0, 1.0, "contrast")).backward()
    assert torch.all(out.class_weights.grad[0] == 0)
    assert torch.any(out.class_weights.grad[1] != 0)


def test_contrast_target_unchanged_by_false_row_perturbation(rng):
    out = random_output(rng)
    h = torch.from_numpy(rng.uniform(size=(4, 5)))
    w = LossWeights(0.0, 0.0, 1.0, "contrast")
    before = loss_contrast(out, 0, h, w).item()
    t_before = compute_true_norm(out, 0)
    out2 = ModelOutput(out.logits, out.features, out.class_weights.clone(), out.biases)
    out2.class_weights[1] += torch.from_numpy(rng.normal(size=3))
    assert torch.equal(compute_true_norm(out2, 0), t_before)
    assert loss_contrast(out2, 0, h, w).item() != before


def compute_true_norm(out, label):
    from contrastcam.cam import class_cams_tensor, normalize_unit_tensor

    return normalize_unit_tensor(class_cams_tensor(out)[label])


def test_misaligned_heatmap_rejected(rng):
    out = random_output(rng)
    with pytest.raises(ValidationError, match="resize"):
        loss_baseline(out, 0, torch.zeros(8, 10), LossWeights.default("baseline"))


def test_wrong_variant_rejected(rng):
    with pytest.raises(ValidationError):
        loss_baseline(random_output(rng), 0, torch.zeros(4, 5), LossWeights.default("contrast"))


def test_salience_map_heatmap_accepted(rng):
    out = random_output(rng)
    h = rng.uniform(size=(4, 5))
    w = LossWeights.default("baseline")
    a = loss_baseline(out, 1, SalienceMap(h, normalized=True), w).item()
    b = loss_baseline(out, 1, torch.from_numpy(h), w).item()
    assert a == pytest.approx(b, abs=1e-12)


@pytest.mark.parametrize("variant", ["baseline", "difference", "per_class", "contrast", "cross_entropy_only"])
def test_losses_finite_and_nonnegative(variant, rng):
    w = LossWeights.default(variant)
    for _ in range(20):
        out = random_output(rng, batch=4)
        labels = torch.from_numpy(rng.integers(0, 2, size=4))
        h = torch.from_numpy(rng.uniform(size=(4, 4, 5)))
        vals = sample_losses(out, labels, h, w)
        assert torch.isfinite(vals).all() and (vals >= 0).all()


@pytest.mark.parametrize("variant", ["baseline", "difference", "per_class", "contrast"])
def test_zero_salience_weights_collapse_to_cross_entropy(variant, rng):
    ce_only = LossWeights(0.7, 0.0, 0.0, "cross_entropy_only")
    collapsed = LossWeights(0.7, 0.0, 0.0, variant)
    out = random_output(rng, batch=6)
    labels = torch.from_numpy(rng.integers(0, 2, size=6))
    h = torch.from_numpy(rng.uniform(size=(6, 4, 5)))
    assert torch.equal(batch_loss(out, labels, h, collapsed), batch_loss(out, labels, None, ce_only))


class TestBatchLoss:
    def _batch(self, rng, n):
        out = random_output(rng, batch=n)
        labels = torch.from_numpy(rng.integers(0, 2, size=n))
        h = torch.from_numpy(rng.uniform(size=(n, 4, 5)))
        return out, labels, h

    def test_batch_of_one(self, rng):
        out, labels, h = self._batch(rng, 1)
        w = LossWeights.default("per_class")
        single = ModelOutput(out.logits[0], out.features[0], out.class_weights, out.biases)
        assert batch_loss(out, labels, h, w).item() == pytest.approx(
            loss_per_class(single, int(labels[0]), h[0], w).item(), abs=1e-12
        )

    def test_duplicated_samples(self, rng):
        out, labels, h = self._batch(rng, 1)
        dup = ModelOutput(out.logits.repeat(2, 1), out.features.repeat(2, 1, 1, 1), out.class_weights, out.biases)
        w = LossWeights.default("contrast")
        assert batch_loss(dup, labels.repeat(2), h.repeat(2, 1, 1), w).item() == pytest.approx(
            batch_loss(out, labels, h, w).item(), abs=1e-12
        )

    def test_mean_of_individual_losses(self, rng):
        out, labels, h = self._batch(rng, 8)
        for variant, fn in LOSS_FNS.items():
            w = LossWeights.default(variant)
            individual = [
                fn(ModelOutput(out.logits[i], out.features[i], out.class_weights, out.biases), int(labels[i]), h[i], w).item()
                for i in range(8)
            ]
            assert batch_loss(out, labels, h, w).item() == pytest.approx(sum(individual) / 8, abs=1e-9)

    def test_empty_batch(self):
        out = ModelOutput(torch.zeros(0, 2), torch.zeros(0, 1, 2, 2), torch.zeros(2, 1), torch.zeros(2))
        with pytest.raises(ValidationError):
            batch_loss(out, torch.zeros(0, dtype=torch.long), torch.zeros(0, 2, 2), LossWeights.default("baseline"))
