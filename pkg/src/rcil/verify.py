"""Runtime invariant suite behind the ``verify`` CLI verb.

Each check returns (name, passed, detail).  The checks take injectable
parameters (corruption size, merge weights) so tests can confirm the suite
catches real faults, not just happy paths.
"""

import numpy as np

from . import kernels, ops
from .autograd import Tensor, relu
from .distill import DistillConfig, PoolSpec, ckd_loss, skd_loss
from .losses import ClassPartition, unce_loss, unkd_loss
from .rcblock import RCBlock, fuse_conv_bn, merge_branches, step_transition


def finite_difference_check(fn, tensors, rng, h=1e-4, rtol=1e-3, atol=1e-6, max_checks=24):
    """Compare analytic gradients of scalar ``fn()`` against central differences.

    ``fn`` must rebuild the graph from ``tensors`` on every call.  Returns the
    worst (abs_err / threshold) ratio seen; <= 1 means pass.
    """
    for t in tensors:
        t.zero_grad()
    loss = fn()
    loss.backward()
    grads = [None if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, g in zip(tensors, grads):
        if g is None:
            raise AssertionError("no gradient reached a checked tensor")
        flat_idx = np.arange(t.data.size)
        if t.data.size > max_checks:
            flat_idx = rng.choice(t.data.size, size=max_checks, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, t.data.shape)
            orig = t.data[idx]
            t.data[idx] = orig + h
            up = fn().item()
            t.data[idx] = orig - h
            dn = fn().item()
            t.data[idx] = orig
            fd = (up - dn) / (2 * h)
            an = g[idx]
            err = abs(fd - an)
            bound = rtol * max(abs(fd), abs(an)) + atol
            worst = max(worst, err / bound)
    return worst


def _random_block(rng, in_ch=3, out_ch=4, stride=1):
    blk = RCBlock.fresh(in_ch, out_ch, rng, stride=stride)
    for br in (blk.branch_a, blk.branch_b):
        br.norm.gamma.data = rng.uniform(0.5, 1.5, out_ch)
        br.norm.beta.data = rng.standard_normal(out_ch) * 0.2
        br.norm.running_mean = rng.standard_normal(out_ch) * 0.3
        br.norm.running_var = rng.uniform(0.3, 2.0, out_ch)
        br.conv.bias.data = rng.standard_normal(out_ch) * 0.1
    return blk


def check_gradients(seed=0, cases=20):
    """Finite-difference pass over composed graphs of every layer op."""
    rng = np.random.default_rng(seed)
    failures = []
    for case in range(cases):
        x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5, requires_grad=True)
        b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)
        beta = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
        rm, rv = np.zeros(4), np.ones(4)

        def net():
            h1 = ops.conv2d(x, w, b, stride=1, padding=1)
            h2 = ops.batchnorm2d(h1, gamma, beta, rm.copy(), rv.copy(), 1e-5, 0.1, True)
            h3 = ops.avg_pool2d(relu(h2), 2, 2)
            h4 = ops.upsample_bilinear(h3, (6, 6))
            p = ops.softmax_channels(h4)
            return (p * p).sum()

        worst = finite_difference_check(net, [x, w, b, gamma, beta], rng, max_checks=5)
        if worst > 1.0:
            failures.append(f"case {case}: rel err ratio {worst:.2e}")
    return "op gradient suite", not failures, "; ".join(failures) or f"{cases} composed graphs"


def check_loss_gradients(seed=1, cases=20):
    """Finite differences over both unbiased objectives and the pooled loss."""
    rng = np.random.default_rng(seed)
    failures = []
    for case in range(cases):
        part = ClassPartition(n_old=2, n_new=2)
        logits = Tensor(rng.standard_normal((1, 5, 4, 4)), requires_grad=True)
        labels = rng.choice([0, 3, 4], (1, 4, 4)).astype(np.int64)
        logits_t = Tensor(rng.standard_normal((1, 3, 4, 4)))
        tap_t = [Tensor(rng.standard_normal((1, 3, 6, 6)))]
        tap_s = [Tensor(rng.standard_normal((1, 3, 6, 6)), requires_grad=True)]
        cfg = DistillConfig(pool=PoolSpec(spatial_kernels=(2, 4)))

        checks = [
            (lambda: unce_loss(logits, labels, part), [logits]),
            (lambda: unkd_loss(logits, logits_t, part), [logits]),
            (lambda: skd_loss(tap_t, tap_s, cfg) + ckd_loss(tap_t, tap_s, cfg), tap_s),
        ]
        for i, (fn, tensors) in enumerate(checks):
            worst = finite_difference_check(fn, tensors, rng, max_checks=5)
            if worst > 1.0:
                failures.append(f"case {case}.{i}: ratio {worst:.2e}")
    return "loss gradient suite", not failures, "; ".join(failures) or f"{cases}x3 losses"


def check_merge_equivalence(seed=2, cases=100, probes=1, corrupt=0.0,
                            merge_weights=(0.5, 0.5), tol=1e-6):
    """Merged single conv vs the two-branch eval path on random blocks.

    ``corrupt`` adds a constant to one merged weight; ``merge_weights``
    overrides the 0.5/0.5 fusion (both exist for fault-injection tests).
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        blk = _random_block(rng, stride=int(rng.integers(1, 3)))
        merged = merge_branches(blk, merge_weights)
        if corrupt:
            merged.weight.data[0, 0, 0, 0] += corrupt
        for _ in range(probes):
            x = rng.standard_normal((1, 3, 8, 8))
            got = kernels.conv2d_forward(x, merged.weight.data, merged.bias.data,
                                         (merged.stride,) * 2, (merged.padding,) * 2)
            want = blk.forward_eval(Tensor(x)).data
            worst = max(worst, float(np.abs(got - want).max()))
    return ("merge equivalence", worst < tol,
            f"max |merged - two-branch| = {worst:.2e} over {cases} blocks")


def check_fusion_oracle(seed=3, cases=50, tol=1e-8):
    """Folded conv+norm vs the explicit two-stage path."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        blk = _random_block(rng)
        br = blk.branch_a
        fused = fuse_conv_bn(br.conv, br.norm)
        x = rng.standard_normal((1, 3, 6, 6))
        sigma = np.sqrt(br.norm.running_var + br.norm.eps)
        y = kernels.conv2d_forward(x, br.conv.weight.data, br.conv.bias.data, (1, 1), (1, 1))
        want = (br.norm.gamma.data[None, :, None, None]
                * (y - br.norm.running_mean[None, :, None, None]) / sigma[None, :, None, None]
                + br.norm.beta.data[None, :, None, None])
        got = kernels.conv2d_forward(x, fused.weight.data, fused.bias.data, (1, 1), (1, 1))
        worst = max(worst, float(np.abs(got - want).max()))
    return "conv+norm fusion", worst < tol, f"max abs diff = {worst:.2e} over {cases} cases"


def check_step_transition(seed=4, cases=20, merge_weights=(0.5, 0.5), tol=1e-9):
    """The transition's frozen branch must reproduce the previous block's
    inference function (demands the 0.5/0.5 merge)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        prev = _random_block(rng)
        nxt = step_transition(prev, merge_weights=merge_weights)
        x = Tensor(rng.standard_normal((1, 3, 8, 8)))
        frozen = nxt.branch_a.forward(x, training=False).data
        worst = max(worst, float(np.abs(frozen - prev.forward_eval(x).data).max()))
    return ("step transition equivalence", worst < tol,
            f"max |frozen - previous eval| = {worst:.2e}")


def check_drop_path_expectation(seed=5, cases=20, tol=1e-9):
    """Mean over the three blend levels equals the inference output."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        blk = _random_block(rng)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        acc = None
        for eta in (0.0, 0.5, 1.0):
            out = blk.forward_train(x, np.full(4, eta), batch_stats=False).data
            acc = out if acc is None else acc + out
        worst = max(worst, float(np.abs(acc / 3.0 - blk.forward_eval(x).data).max()))
    return "drop-path expectation identity", worst < tol, f"max abs diff = {worst:.2e}"


def check_distill_oracles(seed=6, tol=1e-8):
    """Pooled losses vs explicit sliding-window references."""
    rng = np.random.default_rng(seed)
    shapes = [(2, 4, 8, 8), (2, 5, 6, 6)]
    taps_t = [Tensor(rng.standard_normal(s)) for s in shapes]
    taps_s = [Tensor(rng.standard_normal(s)) for s in shapes]
    cfg = DistillConfig(pool=PoolSpec(spatial_kernels=(2, 3)))

    def brute_spatial():
        layer_vals = []
        for tt, ts in zip(taps_t, taps_s):
            a, b = tt.data ** 2, ts.data ** 2
            h, w = a.shape[2:]
            terms = []
            for k in (2, 3):
                ho, wo = h - k + 1, w - k + 1
                pa = np.zeros(a.shape[:2] + (ho, wo))
                pb = np.zeros_like(pa)
                for y in range(ho):
                    for x in range(wo):
                        pa[:, :, y, x] = a[:, :, y : y + k, x : x + k].mean(axis=(2, 3))
                        pb[:, :, y, x] = b[:, :, y : y + k, x : x + k].mean(axis=(2, 3))
                terms.append(np.sqrt(((pa - pb) ** 2).sum(axis=(1, 2, 3))).mean())
            layer_vals.append(np.mean(terms))
        return float(np.mean(layer_vals))

    def brute_channel():
        layer_vals = []
        for tt, ts in zip(taps_t, taps_s):
            a, b = tt.data ** 2, ts.data ** 2
            co = a.shape[1] - 2
            pa = np.stack([a[:, j : j + 3].mean(axis=1) for j in range(co)], axis=1)
            pb = np.stack([b[:, j : j + 3].mean(axis=1) for j in range(co)], axis=1)
            layer_vals.append(np.sqrt(((pa - pb) ** 2).sum(axis=(1, 2, 3))).mean())
        return float(np.mean(layer_vals))

    err_s = abs(skd_loss(taps_t, taps_s, cfg).item() - brute_spatial())
    err_c = abs(ckd_loss(taps_t, taps_s, cfg).item() - brute_channel())
    zero_s = skd_loss(taps_t, taps_t, cfg).item()
    zero_c = ckd_loss(taps_t, taps_t, cfg).item()
    noise = [rng.standard_normal(s) for s in shapes]
    vals = []
    for alpha in (0.1, 0.2, 0.4):
        shifted = [Tensor(t.data + alpha * z) for t, z in zip(taps_t, noise)]
        vals.append(skd_loss(taps_t, shifted, cfg).item()
                    + ckd_loss(taps_t, shifted, cfg).item())
    monotone = vals[0] < vals[1] < vals[2]
    ok = err_s < tol and err_c < tol and zero_s == 0.0 and zero_c == 0.0 and monotone
    return ("distillation oracles", ok,
            f"spatial err {err_s:.2e}, channel err {err_c:.2e}, "
            f"zero=({zero_s},{zero_c}), monotone={monotone}")


def check_protocol_set_logic(seed=7):
    """Filtering/relabeling vs an exhaustive set-logic oracle on a small
    hand-built corpus."""
    from .data import ScenePool
    from .protocol import build_schedule, filter_and_relabel

    rng = np.random.default_rng(seed)
    masks = []
    for _ in range(12):
        m = np.zeros((6, 6), dtype=np.int64)
        for _ in range(int(rng.integers(1, 4))):
            cls = int(rng.integers(1, 5))
            y, x = rng.integers(0, 5, 2)
            m[y : y + 2, x : x + 2] = cls
        masks.append(m)
    masks = np.stack(masks)
    pool = ScenePool(images=np.zeros((12, 3, 6, 6)), masks=masks,
                     domains=np.zeros(12, dtype=np.int64))
    problems = []
    for labeling in ("disjoint", "overlapped"):
        sched = build_schedule("2-1", 4, labeling=labeling)
        for t in range(sched.n_steps):
            current = set(sched.classes_at(t))
            future = set(sched.future_classes(t))
            expect_keep = []
            for i in range(12):
                present = {int(c) for c in np.unique(masks[i]) if c != 0}
                if labeling == "disjoint":
                    if not (present & future):
                        expect_keep.append(i)
                elif present & current:
                    expect_keep.append(i)
            try:
                ds = filter_and_relabel(pool, sched, t)
            except ValueError:
                if expect_keep:
                    problems.append(f"{labeling} t={t}: engine empty, oracle kept {expect_keep}")
                continue
            if ds.provenance != expect_keep:
                problems.append(f"{labeling} t={t}: {ds.provenance} != {expect_keep}")
                continue
            for row, i in enumerate(expect_keep):
                expected_mask = masks[i].copy()
                expected_mask[~np.isin(expected_mask, list(current) + [0, 255])] = 0
                if not np.array_equal(ds.masks[row], expected_mask):
                    problems.append(f"{labeling} t={t} scene {i}: mask bytes differ")
    return ("protocol set logic", not problems,
            "; ".join(problems) or "12-scene corpus, both labelings, all steps")


def check_pool_identity(seed=8):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 7, 9))
    y = kernels.avgpool2d_forward(x, (1, 1), (1, 1))
    ok = np.array_equal(y, x)
    return "kernel-1 pooling identity", ok, "bit-exact" if ok else "differs"


def run_all(quick=False):
    scale = 5 if quick else None
    checks = [
        check_gradients(cases=scale or 20),
        check_loss_gradients(cases=scale or 20),
        check_merge_equivalence(cases=scale or 100),
        check_fusion_oracle(cases=scale or 50),
        check_step_transition(cases=scale or 20),
        check_drop_path_expectation(cases=scale or 20),
        check_distill_oracles(),
        check_protocol_set_logic(),
        check_pool_identity(),
    ]
    return checks
