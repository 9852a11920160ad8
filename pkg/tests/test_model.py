"""Segmentation network structure, head growth, and step models."""

import numpy as np
import pytest

from rcil import kernels, ops
from rcil.autograd import Tensor
from rcil.kernels import ShapeError
from rcil.model import (
    ArchSpec,
    SegNetwork,
    extend_head,
    make_step_model,
)


def small_net(n_classes=4, use_rc=True, seed=0):
    return SegNetwork(ArchSpec(), n_classes, np.random.default_rng(seed), use_rc=use_rc)


class TestForward:
    def test_tap_count_and_logit_shape(self):
        net = small_net()
        x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 32, 32)))
        logits, taps = net.forward(x)
        assert len(taps) == 4
        assert logits.data.shape == (2, 5, 32, 32)

    def test_head_size_at_first_step_of_15_1(self):
        net = small_net(n_classes=15)
        assert net.head.out_ch == 16

    def test_softmax_normalized_per_pixel(self):
        net = small_net()
        x = Tensor(np.random.default_rng(2).standard_normal((1, 3, 16, 16)))
        logits, _ = net.forward(x)
        p = ops.softmax_channels(logits)
        np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-12)

    def test_wrong_channel_count_rejected(self):
        net = small_net()
        with pytest.raises(ShapeError):
            net.forward(Tensor(np.zeros((1, 4, 16, 16))))

    def test_taps_are_preactivations(self):
        # every tap may carry negative values; the activations downstream cannot
        net = small_net()
        x = Tensor(np.random.default_rng(3).standard_normal((2, 3, 16, 16)))
        _, taps = net.forward(x)
        assert any((t.data < 0).any() for t in taps)


class TestExtendHead:
    def test_old_logits_identical_after_extension(self):
        net = small_net()
        x = Tensor(np.random.default_rng(4).standard_normal((1, 3, 16, 16)))
        before, _ = net.forward(x)
        extend_head(net, 1)
        after, _ = net.forward(x)
        np.testing.assert_array_equal(before.data, after.data[:, :5])
        assert after.data.shape[1] == 6

    def test_15_1_head_sizes_across_steps(self):
        net = small_net(n_classes=15)
        sizes = [net.head.out_ch]
        for _ in range(5):
            extend_head(net, 1)
            sizes.append(net.head.out_ch)
        assert sizes == [16, 17, 18, 19, 20, 21]

    def test_15_5_final_head(self):
        net = small_net(n_classes=15)
        extend_head(net, 5)
        assert net.head.out_ch == 21

    def test_zero_extension_rejected(self):
        with pytest.raises(ValueError):
            extend_head(small_net(), 0)

    def test_new_rows_copy_background_weights(self):
        net = small_net()
        bg_w = net.head.weight.data[0].copy()
        bg_b = net.head.bias.data[0]
        extend_head(net, 2, shift=0.1)
        np.testing.assert_array_equal(net.head.weight.data[5], bg_w)
        np.testing.assert_array_equal(net.head.weight.data[6], bg_w)
        assert net.head.bias.data[5] == pytest.approx(bg_b - 0.1)


class TestStepModel:
    def test_teacher_equals_previous_network_exactly(self):
        prev = small_net()
        sm = make_step_model(prev, new_classes=1)
        x = Tensor(np.random.default_rng(5).standard_normal((2, 3, 16, 16)))
        a, _ = prev.forward(x)
        b, _ = sm.teacher.forward(x)
        np.testing.assert_array_equal(a.data, b.data)

    def test_teacher_fully_frozen(self):
        sm = make_step_model(small_net(), new_classes=1)
        assert sm.teacher.parameters() == []

    def test_student_trainables_exclude_frozen_branches(self):
        sm = make_step_model(small_net(), new_classes=1)
        trainable_ids = {id(p) for p in sm.student.parameters()}
        for block in sm.student.blocks():
            for t in block.branch_a.conv.parameters() + block.branch_a.norm.parameters():
                assert id(t) not in trainable_ids
                assert not t.requires_grad

    def test_student_with_identical_branches_matches_teacher_old_logits(self):
        prev = small_net()
        for block in prev.blocks():
            block.branch_b = block.branch_a.clone()
        sm = make_step_model(prev, new_classes=1)
        x = Tensor(np.random.default_rng(6).standard_normal((1, 3, 16, 16)))
        t_logits, _ = sm.teacher.forward(x)
        s_logits, _ = sm.student.forward(x)
        assert np.abs(t_logits.data - s_logits.data[:, :5]).max() < 1e-9

    def test_frozen_path_alone_reproduces_teacher_logits(self):
        # drop-path pinned to 1 routes every block through its merged frozen
        # branch, which must be the teacher's inference function
        prev = small_net()
        sm = make_step_model(prev, new_classes=1)
        x = Tensor(np.random.default_rng(7).standard_normal((1, 3, 16, 16)))
        t_logits, _ = sm.teacher.forward(x)
        s_logits, _ = sm.student.forward(
            x, training=True, batch_stats=False, drop_path_value=1.0)
        assert np.abs(t_logits.data - s_logits.data[:, :5]).max() < 1e-9


class TestDeploy:
    def test_merged_network_matches_eval_forward(self):
        net = small_net()
        dep = net.deploy()
        x = Tensor(np.random.default_rng(8).standard_normal((1, 3, 16, 16)))
        a, _ = net.forward(x)
        b = dep.forward(x)
        assert np.abs(a.data - b.data).max() < 1e-6

    def test_parameter_count_constant_across_steps(self):
        net = small_net()
        counts = [net.deploy().parameter_count()]
        for _ in range(3):
            net = make_step_model(net, new_classes=0).student
            counts.append(net.deploy().parameter_count())
        assert len(set(counts)) == 1

    def test_one_conv_per_block_at_inference(self):
        net = small_net()
        dep = net.deploy()
        x = Tensor(np.random.default_rng(9).standard_normal((1, 3, 16, 16)))
        with kernels.count_macs() as counter:
            dep.forward(x)
        n_blocks = sum(len(s) for s in net.stages) + 1
        assert counter.conv_calls == n_blocks + 1  # blocks + 1x1 head


def test_state_roundtrip_bit_exact():
    net = small_net()
    st = {k: v.copy() for k, v in net.state().items()}
    other = small_net(seed=77)
    other.load_state(st)
    assert other.state_hash() == net.state_hash()
    for k, v in other.state().items():
        assert np.array_equal(v, st[k])
