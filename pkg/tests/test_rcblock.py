"""Two-branch block mechanics: blending, fusion, merging, transitions."""

import numpy as np
import pytest

from rcil import kernels
from rcil.autograd import Tensor
from rcil.kernels import ShapeError
from rcil.layers import BatchNorm2d, Conv2d
from rcil.optim import SGD, OptimizerState
from rcil.rcblock import (
    RCBlock,
    RCBranch,
    fuse_conv_bn,
    merge_branches,
    sample_drop_path,
    step_transition,
)


def random_block(rng, in_ch=3, out_ch=4, stride=1, randomize_stats=True):
    blk = RCBlock.fresh(in_ch, out_ch, rng, stride=stride)
    for br in (blk.branch_a, blk.branch_b):
        br.norm.gamma.data = rng.uniform(0.5, 1.5, out_ch)
        br.norm.beta.data = rng.standard_normal(out_ch) * 0.2
        if randomize_stats:
            br.norm.running_mean = rng.standard_normal(out_ch) * 0.3
            br.norm.running_var = rng.uniform(0.3, 2.0, out_ch)
        br.conv.bias.data = rng.standard_normal(out_ch) * 0.1
    return blk


def eval_branch_oracle(branch, x):
    """Independent conv -> eval-BN path using raw kernels and the BN formula."""
    y = kernels.conv2d_forward(
        x, branch.conv.weight.data, branch.conv.bias.data,
        (branch.conv.stride,) * 2, (branch.conv.padding,) * 2,
    )
    sigma = np.sqrt(branch.norm.running_var + branch.norm.eps)
    return (
        branch.norm.gamma.data[None, :, None, None]
        * (y - branch.norm.running_mean[None, :, None, None])
        / sigma[None, :, None, None]
        + branch.norm.beta.data[None, :, None, None]
    )


class TestTrainForward:
    def test_mask_all_ones_selects_branch_a(self):
        rng = np.random.default_rng(0)
        blk = random_block(rng)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        out = blk.forward_train(x, np.ones(4))
        only_a = blk.branch_a.forward(x, training=True)
        np.testing.assert_allclose(out.data, only_a.data, atol=1e-12)

    def test_mask_all_zeros_selects_branch_b(self):
        rng = np.random.default_rng(1)
        blk = random_block(rng)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        out = blk.forward_train(x, np.zeros(4))
        only_b = blk.branch_b.forward(x, training=True)
        np.testing.assert_allclose(out.data, only_b.data, atol=1e-12)

    def test_mask_half_equals_inference_fusion(self):
        rng = np.random.default_rng(2)
        blk = random_block(rng)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        out = blk.forward_train(x, np.full(4, 0.5), batch_stats=False)
        np.testing.assert_allclose(out.data, blk.forward_eval(x).data, atol=1e-12)

    def test_mask_length_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        blk = random_block(rng)
        with pytest.raises(ShapeError):
            blk.forward_train(Tensor(np.zeros((1, 3, 4, 4))), np.ones(5))

    def test_drop_path_sampling_levels(self):
        rng = np.random.default_rng(4)
        draws = np.concatenate([sample_drop_path(rng, 64) for _ in range(50)])
        assert set(np.unique(draws)) == {0.0, 0.5, 1.0}
        counts = [np.sum(draws == v) for v in (0.0, 0.5, 1.0)]
        assert min(counts) > 0.25 * len(draws) / 3

    def test_gradients_only_reach_trainable_branch(self):
        rng = np.random.default_rng(5)
        blk = random_block(rng)
        blk = step_transition(blk)  # branch_a merged+frozen
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        out = blk.forward_train(x, sample_drop_path(rng, 4))
        (out * out).sum().backward()
        assert blk.branch_a.conv.weight.grad is None
        assert blk.branch_a.norm.gamma.grad is None
        assert blk.branch_b.conv.weight.grad is not None
        assert all(p.requires_grad for p in blk.parameters())


class TestEvalForward:
    def test_identical_branches_equal_single_branch(self):
        rng = np.random.default_rng(6)
        blk = random_block(rng)
        blk.branch_b = blk.branch_a.clone()
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        np.testing.assert_allclose(
            blk.forward_eval(x).data,
            blk.branch_a.forward(x, training=False).data,
            atol=1e-12,
        )

    def test_zeroed_branch_b_halves_output(self):
        rng = np.random.default_rng(7)
        blk = random_block(rng)
        bb = blk.branch_b
        bb.conv.weight.data[...] = 0.0
        bb.conv.bias.data[...] = 0.0
        bb.norm.gamma.data[...] = 0.0
        bb.norm.beta.data[...] = 0.0
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        np.testing.assert_allclose(
            blk.forward_eval(x).data,
            0.5 * blk.branch_a.forward(x, training=False).data,
            atol=1e-12,
        )

    def test_matches_two_path_oracle(self):
        rng = np.random.default_rng(8)
        blk = random_block(rng)
        x = rng.standard_normal((2, 3, 8, 8))
        want = 0.5 * eval_branch_oracle(blk.branch_a, x) + 0.5 * eval_branch_oracle(blk.branch_b, x)
        got = blk.forward_eval(Tensor(x)).data
        assert np.abs(got - want).max() < 1e-9

    def test_expectation_identity_over_drop_path_levels(self):
        rng = np.random.default_rng(9)
        blk = random_block(rng)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        acc = None
        for eta in (0.0, 0.5, 1.0):
            out = blk.forward_train(x, np.full(4, eta), batch_stats=False).data
            acc = out if acc is None else acc + out
        np.testing.assert_allclose(acc / 3.0, blk.forward_eval(x).data, atol=1e-9)


class TestFusion:
    def test_identity_norm_keeps_conv(self):
        rng = np.random.default_rng(10)
        conv = Conv2d(3, 4, 3, rng=rng)
        conv.bias.data = rng.standard_normal(4)
        fused = fuse_conv_bn(conv, BatchNorm2d.identity(4))
        np.testing.assert_array_equal(fused.weight.data, conv.weight.data)
        np.testing.assert_array_equal(fused.bias.data, conv.bias.data)

    def test_pure_scaling_doubles(self):
        rng = np.random.default_rng(11)
        conv = Conv2d(3, 4, 3, rng=rng)
        conv.bias.data = rng.standard_normal(4)
        norm = BatchNorm2d.identity(4)
        norm.gamma.data[...] = 2.0
        fused = fuse_conv_bn(conv, norm)
        np.testing.assert_allclose(fused.weight.data, 2.0 * conv.weight.data)
        np.testing.assert_allclose(fused.bias.data, 2.0 * conv.bias.data)

    def test_two_stage_oracle_50_cases(self):
        rng = np.random.default_rng(12)
        worst = 0.0
        for _ in range(50):
            blk = random_block(rng)
            br = blk.branch_a
            fused = fuse_conv_bn(br.conv, br.norm)
            x = rng.standard_normal((1, 3, 6, 6))
            two_stage = eval_branch_oracle(br, x)
            one_stage = kernels.conv2d_forward(x, fused.weight.data, fused.bias.data, (1, 1), (1, 1))
            worst = max(worst, np.abs(two_stage - one_stage).max())
        assert worst < 1e-8


class TestMerge:
    def test_unit_weights_identity_norms_sum_params(self):
        rng = np.random.default_rng(13)
        blk = RCBlock.fresh(3, 4, rng)
        blk.branch_a.norm = BatchNorm2d.identity(4)
        blk.branch_b.norm = BatchNorm2d.identity(4)
        merged = merge_branches(blk, (1.0, 1.0))
        np.testing.assert_allclose(
            merged.weight.data, blk.branch_a.conv.weight.data + blk.branch_b.conv.weight.data)
        np.testing.assert_allclose(
            merged.bias.data, blk.branch_a.conv.bias.data + blk.branch_b.conv.bias.data)

    def test_identical_branches_merge_to_single_fusion(self):
        rng = np.random.default_rng(14)
        blk = random_block(rng)
        blk.branch_b = blk.branch_a.clone()
        merged = merge_branches(blk, (0.5, 0.5))
        fused = fuse_conv_bn(blk.branch_a.conv, blk.branch_a.norm)
        np.testing.assert_allclose(merged.weight.data, fused.weight.data, atol=1e-12)
        np.testing.assert_allclose(merged.bias.data, fused.bias.data, atol=1e-12)

    def test_forward_equivalence_on_random_probes(self):
        rng = np.random.default_rng(15)
        worst = 0.0
        for _ in range(20):
            blk = random_block(rng, stride=rng.integers(1, 3))
            merged = merge_branches(blk, (0.5, 0.5))
            for _ in range(5):
                x = rng.standard_normal((1, 3, 8, 8))
                got = kernels.conv2d_forward(
                    x, merged.weight.data, merged.bias.data, (merged.stride,) * 2, (merged.padding,) * 2)
                want = blk.forward_eval(Tensor(x)).data
                worst = max(worst, np.abs(got - want).max())
        assert worst < 1e-6


class TestStepTransition:
    def test_frozen_branch_reproduces_half_of_previous_eval(self):
        rng = np.random.default_rng(16)
        prev = random_block(rng)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        prev_eval = prev.forward_eval(x).data
        nxt = step_transition(prev)
        bb = nxt.branch_b
        bb.conv.weight.data[...] = 0.0
        bb.conv.bias.data[...] = 0.0
        bb.norm.gamma.data[...] = 0.0
        bb.norm.beta.data[...] = 0.0
        np.testing.assert_allclose(nxt.forward_eval(x).data, 0.5 * prev_eval, atol=1e-9)

    def test_transition_preserves_inference_function_in_frozen_branch(self):
        rng = np.random.default_rng(17)
        prev = random_block(rng)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        nxt = step_transition(prev)
        frozen_out = nxt.branch_a.forward(x, training=False).data
        np.testing.assert_allclose(frozen_out, prev.forward_eval(x).data, atol=1e-9)

    def test_double_transition_keeps_trainable_branch_bits(self):
        rng = np.random.default_rng(18)
        blk = random_block(rng)
        b_before = blk.branch_b.conv.weight.data.copy()
        one = step_transition(blk)
        two = step_transition(one)
        assert np.array_equal(two.branch_b.conv.weight.data, b_before)

    def test_frozen_gradients_identically_zero(self):
        rng = np.random.default_rng(19)
        blk = step_transition(random_block(rng))
        x = Tensor(rng.standard_normal((1, 3, 6, 6)))
        out = blk.forward_train(x, sample_drop_path(rng, 4))
        (out * out).sum().backward()
        for t in blk.branch_a.conv.parameters() + blk.branch_a.norm.parameters():
            assert t.grad is None

    def test_merge_without_freeze_keeps_branch_trainable(self):
        rng = np.random.default_rng(20)
        blk = step_transition(random_block(rng), merge=True, freeze=False)
        assert blk.branch_a.trainable
        x = Tensor(rng.standard_normal((1, 3, 6, 6)))
        out = blk.forward_train(x, np.full(4, 0.5))
        (out * out).sum().backward()
        assert blk.branch_a.conv.weight.grad is not None

    def test_freeze_invariance_under_optimizer_steps(self):
        rng = np.random.default_rng(21)
        blk = step_transition(random_block(rng))
        frozen_bytes = {k: v.copy() for k, v in blk.branch_a.state().items()}
        opt = SGD(blk.parameters(), OptimizerState(base_lr=0.1, total_iterations=10))
        for _ in range(3):
            x = Tensor(rng.standard_normal((2, 3, 8, 8)))
            out = blk.forward_train(x, sample_drop_path(rng, 4))
            opt.zero_grad()
            (out * out).sum().backward()
            opt.step()
        for k, v in blk.branch_a.state().items():
            assert np.array_equal(v, frozen_bytes[k]), k


def test_state_roundtrip_bit_exact():
    rng = np.random.default_rng(22)
    blk = step_transition(random_block(rng))
    st = blk.state()
    clone = step_transition(random_block(np.random.default_rng(99)))
    clone.load_state(st)
    for k, v in clone.state().items():
        assert np.array_equal(v, st[k]), k
