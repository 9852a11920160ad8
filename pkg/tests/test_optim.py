"""Momentum SGD and the polynomial schedule."""

import numpy as np
import pytest

from rcil.autograd import Tensor
from rcil.optim import SGD, OptimizerState


def test_vanilla_step():
    p = Tensor(np.zeros(1), requires_grad=True)
    p.grad = np.ones(1)
    opt = SGD([p], OptimizerState(base_lr=0.1, momentum=0.0, total_iterations=10, poly_power=0.9))
    opt.step()
    assert p.data[0] == pytest.approx(-0.1 * (1 - 0 / 10) ** 0.9)
    assert opt.state.iteration == 1


def test_schedule_endpoint_freezes_params():
    p = Tensor(np.ones(3), requires_grad=True)
    p.grad = np.ones(3)
    opt = SGD([p], OptimizerState(base_lr=0.5, momentum=0.0, iteration=10, total_iterations=10))
    opt.step()
    np.testing.assert_array_equal(p.data, np.ones(3))


def test_lr_non_increasing():
    st = OptimizerState(base_lr=0.02, total_iterations=100, poly_power=0.9)
    lrs = []
    for it in range(101):
        st.iteration = it
        lrs.append(st.effective_lr())
    assert all(a >= b >= 0.0 for a, b in zip(lrs, lrs[1:]))
    assert lrs[0] == pytest.approx(0.02)
    assert lrs[-1] == 0.0


def test_three_momentum_steps_match_hand_recurrence():
    g = 2.0
    mom = 0.9
    base_lr = 0.1
    total = 100
    power = 0.9
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([p], OptimizerState(base_lr=base_lr, momentum=mom, total_iterations=total, poly_power=power))
    x, v = 1.0, 0.0
    for it in range(3):
        p.grad = np.array([g])
        opt.step()
        lr = base_lr * (1 - it / total) ** power
        v = mom * v + g
        x = x - lr * v
    assert p.data[0] == pytest.approx(x, rel=1e-12)


def test_none_grad_leaves_param_untouched():
    p = Tensor(np.ones(2), requires_grad=True)
    opt = SGD([p], OptimizerState(base_lr=1.0, momentum=0.9))
    opt.step()
    np.testing.assert_array_equal(p.data, np.ones(2))
