"""Tape mechanics and elementwise/reduction gradients."""

import numpy as np
import pytest

from rcil import autograd as ag
from rcil.autograd import Tensor
from rcil.verify import finite_difference_check


class TestBackwardContract:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_quadratic(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).sum().backward()
        assert x.grad == pytest.approx(6.0)

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_leaf_grads_accumulate_until_reset(self):
        x = Tensor(np.ones(4), requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        first = x.grad.copy()
        loss.backward()
        np.testing.assert_allclose(x.grad, 2 * first)
        x.zero_grad()
        assert x.grad is None

    def test_no_grad_skips_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ag.no_grad():
            y = (x * 2.0).sum()
        assert y.is_leaf and not y.requires_grad

    def test_diamond_graph_accumulates_both_paths(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * 3.0
        z = (y + x * x).sum()  # z = 3x + x^2, dz/dx = 3 + 2x = 7
        z.backward()
        assert x.grad == pytest.approx(7.0)


class TestElementwiseGradients:
    @pytest.mark.parametrize("case", range(8))
    def test_composed_graph_matches_finite_differences(self, case):
        rng = np.random.default_rng(100 + case)
        a = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)

        def fn():
            t = ag.exp(ag.log(a) * 0.5) + ag.sqrt(b)
            u = ag.square(t - a * b)
            return u.mean() + (a * 0.3).sum()

        assert finite_difference_check(fn, [a, b], rng) <= 1.0

    def test_relu_grad_away_from_kink(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.choice([-1.0, 1.0], size=(4, 4)) * rng.uniform(0.5, 2.0, (4, 4)), requires_grad=True)

        def fn():
            return ag.square(ag.relu(x)).sum()

        assert finite_difference_check(fn, [x], rng) <= 1.0

    def test_broadcast_mul_unbroadcasts_grad(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        v = Tensor(rng.standard_normal((1, 3, 1, 1)), requires_grad=True)

        def fn():
            return (x * v).sum()

        assert finite_difference_check(fn, [x, v], rng) <= 1.0
        assert v.grad.shape == (1, 3, 1, 1)

    def test_sqrt_zero_has_zero_subgradient(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        ag.sqrt(x).sum().backward()
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_axis_reductions(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)

        def fn():
            return ag.square(x.sum(axis=(1, 2))).sum() + x.mean(axis=0).sum()

        assert finite_difference_check(fn, [x], rng) <= 1.0


def test_determinism_same_seed_bitwise():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
        from rcil import ops
        y = ops.conv2d(x, w, Tensor(np.zeros(2), requires_grad=True), 1, 1)
        loss = ag.square(y).sum()
        loss.backward()
        return loss.data.copy(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2) and np.array_equal(g1, g2)
