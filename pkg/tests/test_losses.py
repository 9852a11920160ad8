"""Unbiased objectives and the weighted total."""

import numpy as np
import pytest

from rcil.autograd import Tensor
from rcil.kernels import ShapeError
from rcil.losses import (
    ClassPartition,
    LossWeights,
    adaptive_factor,
    total_loss,
    unce_loss,
    unkd_loss,
)
from rcil.verify import finite_difference_check


def softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestPartition:
    def test_channel_layout(self):
        part = ClassPartition(n_old=3, n_new=2)
        assert part.background == 0
        assert part.old == {1, 2, 3}
        assert part.new == {4, 5}
        assert part.n_channels == 6
        assert part.old.isdisjoint(part.new)

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            ClassPartition(n_old=-1, n_new=1)


class TestUnce:
    def test_step_zero_is_standard_ce(self):
        rng = np.random.default_rng(0)
        part = ClassPartition(n_old=0, n_new=3)
        logits = rng.standard_normal((2, 4, 3, 3))
        labels = rng.integers(0, 4, (2, 3, 3))
        got = unce_loss(Tensor(logits), labels, part).item()
        p = softmax(logits)
        n, h, w = np.indices(labels.shape).reshape(3, -1)
        want = -np.log(p[n, labels.reshape(-1), h, w]).mean()
        assert got == pytest.approx(want, rel=1e-10)

    def test_uniform_logits_background_absorbs_old(self):
        part = ClassPartition(n_old=1, n_new=2)
        logits = Tensor(np.zeros((1, 4, 1, 1)))
        labels = np.zeros((1, 1, 1), dtype=np.int64)
        assert unce_loss(logits, labels, part).item() == pytest.approx(-np.log(0.5))

    def test_old_labels_rejected(self):
        part = ClassPartition(n_old=2, n_new=1)
        logits = Tensor(np.zeros((1, 4, 1, 1)))
        labels = np.full((1, 1, 1), 2, dtype=np.int64)
        with pytest.raises(ValueError):
            unce_loss(logits, labels, part)

    def test_new_only_labels_match_plain_ce(self):
        # without background or old pixels the absorption never engages
        rng = np.random.default_rng(1)
        part = ClassPartition(n_old=2, n_new=2)
        logits = rng.standard_normal((1, 5, 2, 2))
        labels = rng.integers(3, 5, (1, 2, 2))
        got = unce_loss(Tensor(logits), labels, part).item()
        p = softmax(logits)
        n, h, w = np.indices(labels.shape).reshape(3, -1)
        want = -np.log(p[n, labels.reshape(-1), h, w]).mean()
        assert got == pytest.approx(want, rel=1e-10)

    def test_channel_count_checked(self):
        part = ClassPartition(n_old=1, n_new=1)
        with pytest.raises(ShapeError):
            unce_loss(Tensor(np.zeros((1, 5, 1, 1))), np.zeros((1, 1, 1), dtype=int), part)

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        part = ClassPartition(n_old=2, n_new=2)
        logits = Tensor(rng.standard_normal((2, 5, 3, 3)), requires_grad=True)
        labels = rng.choice([0, 3, 4], (2, 3, 3)).astype(np.int64)

        def fn():
            return unce_loss(logits, labels, part)

        assert finite_difference_check(fn, [logits], rng) <= 1.0


class TestUnkd:
    def test_channel_contracts(self):
        part = ClassPartition(n_old=2, n_new=1)
        good_t = Tensor(np.zeros((1, 3, 2, 2)))
        good_s = Tensor(np.zeros((1, 4, 2, 2)))
        unkd_loss(good_s, good_t, part)
        with pytest.raises(ShapeError):
            unkd_loss(good_s, Tensor(np.zeros((1, 4, 2, 2))), part)
        with pytest.raises(ShapeError):
            unkd_loss(Tensor(np.zeros((1, 5, 2, 2))), good_t, part)

    def test_self_distillation_hits_entropy_floor(self):
        rng = np.random.default_rng(3)
        part = ClassPartition(n_old=3, n_new=0)
        logits = rng.standard_normal((1, 4, 2, 2))
        got = unkd_loss(Tensor(logits), Tensor(logits), part).item()
        p = softmax(logits)
        entropy = -(p * np.log(p)).sum(axis=1).mean()
        assert got == pytest.approx(entropy, rel=1e-10)

    def test_ignore_label_mask(self):
        rng = np.random.default_rng(4)
        part = ClassPartition(n_old=1, n_new=1)
        logits_t = rng.standard_normal((1, 2, 1, 2))
        logits_s = rng.standard_normal((1, 3, 1, 2))
        labels = np.array([[[0, 255]]], dtype=np.int64)
        masked = unkd_loss(Tensor(logits_s), Tensor(logits_t), part, labels=labels).item()
        solo = unkd_loss(Tensor(logits_s[..., :1]), Tensor(logits_t[..., :1]), part).item()
        assert masked == pytest.approx(solo, rel=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        part = ClassPartition(n_old=3, n_new=2)
        logits_s = Tensor(rng.standard_normal((2, 6, 3, 3)), requires_grad=True)
        logits_t = Tensor(rng.standard_normal((2, 4, 3, 3)))

        def fn():
            return unkd_loss(logits_s, logits_t, part)

        assert finite_difference_check(fn, [logits_s], rng) <= 1.0


class TestTotal:
    def test_defaults_from_appendix(self):
        w = LossWeights()
        assert w.lam == 100.0 and w.gamma == 0.01

    def test_factor_15_1_step_1(self):
        part = ClassPartition(n_old=15, n_new=1)
        assert adaptive_factor(part) == pytest.approx(4.0)

    def test_factor_background_convention(self):
        part = ClassPartition(n_old=15, n_new=1)
        assert adaptive_factor(part, count_background=True) == pytest.approx(np.sqrt(17 / 2))

    def test_zero_new_classes_rejected(self):
        with pytest.raises(ValueError):
            adaptive_factor(ClassPartition(n_old=3, n_new=0))

    def test_step_zero_total_is_unce_alone(self):
        unce = Tensor(1.25)
        part = ClassPartition(n_old=0, n_new=6)
        total = total_loss(unce, None, None, None, part, LossWeights())
        assert total.item() == pytest.approx(1.25)

    def test_weighted_combination(self):
        part = ClassPartition(n_old=15, n_new=1)
        w = LossWeights(lam=100.0, gamma=0.01)
        total = total_loss(Tensor(1.0), Tensor(0.5), Tensor(2.0), Tensor(3.0), part, w)
        assert total.item() == pytest.approx(1.0 + 100.0 * 4.0 * 0.5 + 0.01 * 5.0)

    def test_weights_must_be_positive(self):
        with pytest.raises(ValueError):
            LossWeights(lam=0.0)
