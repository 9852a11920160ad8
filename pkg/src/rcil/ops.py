"""Differentiable network operations built on the kernel backends.

Shapes follow the (batch, channel, height, width) convention throughout.
Losses that absorb probability mass across channel groups (the unbiased
objectives) are implemented as fused ops with hand-derived gradients; the
finite-difference suite in :mod:`rcil.verify` covers every op here.
"""

import numpy as np

from . import kernels
from .autograd import Tensor, grad_enabled, make
from .kernels import ShapeError


def conv2d(x, weight, bias, stride=1, padding=0):
    """2-d cross-correlation with bias. ``stride``/``padding`` are symmetric ints."""
    st, pd = (stride, stride), (padding, padding)
    y = kernels.conv2d_forward(x.data, weight.data, bias.data, st, pd)

    def bw(out):
        def run(g):
            gx, gw, gb = kernels.conv2d_backward(x.data, weight.data, g, st, pd)
            x.accumulate(gx)
            weight.accumulate(gw)
            bias.accumulate(gb)
        return run

    return make(y, (x, weight, bias), bw)


def batchnorm2d(x, gamma, beta, running_mean, running_var, eps, momentum, training):
    """Channel-wise batch normalization.

    In training mode batch statistics normalize and the running buffers are
    updated in place (running variance uses the unbiased estimate).  In eval
    mode the running statistics normalize and no state changes.
    """
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or running_mean.shape != (c,):
        raise ShapeError(f"batchnorm parameters sized for {gamma.data.shape[0]} channels, input has {c}")
    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        sigma = np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) / sigma[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))

        def bw(out):
            def run(g):
                gbeta = g.sum(axis=(0, 2, 3))
                ggamma = (g * xhat).sum(axis=(0, 2, 3))
                gm = g.mean(axis=(0, 2, 3), keepdims=True)
                gxm = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
                coef = (gamma.data / sigma)[None, :, None, None]
                x.accumulate(coef * (g - gm - xhat * gxm))
                gamma.accumulate(ggamma)
                beta.accumulate(gbeta)
            return run

    else:
        sigma = np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) / sigma[None, :, None, None]

        def bw(out):
            def run(g):
                beta.accumulate(g.sum(axis=(0, 2, 3)))
                gamma.accumulate((g * xhat).sum(axis=(0, 2, 3)))
                x.accumulate(g * (gamma.data / sigma)[None, :, None, None])
            return run

    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    return make(y, (x, gamma, beta), bw)


def avg_pool2d(x, kernel, stride):
    """Average pooling; output value is the arithmetic mean of each window."""
    kernel = (kernel, kernel) if np.isscalar(kernel) else tuple(kernel)
    stride = (stride, stride) if np.isscalar(stride) else tuple(stride)
    hw = x.data.shape[2:]
    y = kernels.avgpool2d_forward(x.data, kernel, stride)

    def bw(out):
        def run(g):
            x.accumulate(kernels.avgpool2d_backward(g, hw, kernel, stride))
        return run

    return make(y, (x,), bw)


def max_pool2d(x, kernel, stride):
    kernel = (kernel, kernel) if np.isscalar(kernel) else tuple(kernel)
    stride = (stride, stride) if np.isscalar(stride) else tuple(stride)
    y = kernels.maxpool2d_forward(x.data, kernel, stride)

    def bw(out):
        def run(g):
            x.accumulate(kernels.maxpool2d_backward(x.data, out.data, g, kernel, stride))
        return run

    return make(y, (x,), bw)


def channel_avg_pool(x, kernel, stride=1):
    """Average pooling along the channel axis at every spatial position."""
    c = x.data.shape[1]
    y = kernels.channel_avgpool_forward(x.data, kernel, stride)

    def bw(out):
        def run(g):
            x.accumulate(kernels.channel_avgpool_backward(g, c, kernel, stride))
        return run

    return make(y, (x,), bw)


def softmax_channels(x):
    """Softmax over the channel axis; each pixel's outputs sum to 1."""
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(out):
        def run(g):
            dot = (g * out.data).sum(axis=1, keepdims=True)
            x.accumulate(out.data * (g - dot))
        return run

    return make(p, (x,), bw)


def log_softmax_channels(x):
    m = x.data.max(axis=1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    ls = shifted - lse

    def bw(out):
        def run(g):
            p = np.exp(out.data)
            x.accumulate(g - p * g.sum(axis=1, keepdims=True))
        return run

    return make(ls, (x,), bw)


def narrow_channels(x, start, stop):
    """Channel slice x[:, start:stop] as a differentiable view-copy."""

    def bw(out):
        def run(g):
            gx = np.zeros_like(x.data)
            gx[:, start:stop] = g
            x.accumulate(gx)
        return run

    return make(x.data[:, start:stop].copy(), (x,), bw)


_interp_cache = {}


def _interp_matrix(n_in, n_out):
    """Half-pixel bilinear interpolation matrix (n_out, n_in)."""
    key = (n_in, n_out)
    if key not in _interp_cache:
        dst = np.arange(n_out, dtype=np.float64)
        src = np.clip((dst + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        t = src - i0
        a = np.zeros((n_out, n_in))
        a[dst.astype(np.int64), i0] += 1.0 - t
        a[dst.astype(np.int64), i1] += t
        _interp_cache[key] = a
    return _interp_cache[key]


def upsample_bilinear(x, out_hw):
    """Resize spatially to ``out_hw`` with half-pixel bilinear interpolation."""
    h, w = x.data.shape[2], x.data.shape[3]
    ho, wo = out_hw
    ah = _interp_matrix(h, ho)
    aw = _interp_matrix(w, wo)
    y = np.matmul(np.matmul(ah, x.data), aw.T)

    def bw(out):
        def run(g):
            x.accumulate(np.matmul(np.matmul(ah.T, g), aw))
        return run

    return make(y, (x,), bw)


def _softmax_parts(logits):
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    return e, z, (logits - m) - np.log(z)


def unbiased_ce(logits, labels, n_absorb, ignore_label=255):
    """Pixel cross-entropy where the first ``n_absorb`` channels share the
    background label's probability mass.

    ``labels`` must contain only 0, channel ids >= n_absorb, or the ignore
    label; with ``n_absorb == 1`` this is plain cross-entropy.
    """
    labels = np.asarray(labels)
    k = logits.data.shape[1]
    if labels.shape != (logits.data.shape[0],) + logits.data.shape[2:]:
        raise ShapeError(f"label map shape {labels.shape} does not match logits {logits.data.shape}")
    valid = labels != ignore_label
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("loss undefined: every pixel carries the ignore label")
    lv = labels[valid]
    bad = (lv != 0) & ((lv < n_absorb) | (lv >= k))
    if bad.any():
        raise ValueError(
            f"labels {sorted(set(lv[bad].tolist()))} outside {{0}} and [{n_absorb},{k}); "
            "stale class ids must be relabeled to background first"
        )
    e, z, logp = _softmax_parts(logits.data)
    log_pbg = np.log(e[:, :n_absorb].sum(axis=1)) - np.log(z[:, 0])
    safe_labels = np.where(valid, labels, 0)
    n_idx, h_idx, w_idx = np.indices(labels.shape).reshape(3, -1)
    picked = logp[n_idx, safe_labels.reshape(-1), h_idx, w_idx].reshape(labels.shape)
    per_pixel = np.where(safe_labels == 0, log_pbg, picked)
    loss = -per_pixel[valid].sum() / n_valid

    def bw(out):
        def run(g):
            p = e / z
            pbg = p[:, :n_absorb].sum(axis=1)
            gx = p.copy()
            bg_factor = np.where((safe_labels == 0) & valid, 1.0 / pbg, 0.0)
            gx[:, :n_absorb] -= p[:, :n_absorb] * bg_factor[:, None]
            fg = valid & (safe_labels != 0)
            nn, hh, ww = np.nonzero(fg)
            gx[nn, safe_labels[fg], hh, ww] -= 1.0
            gx *= valid[:, None].astype(np.float64)
            logits.accumulate(gx * (float(g) / n_valid))
        return run

    return make(loss, (logits,), bw)


def unbiased_kd(logits_s, probs_t, valid=None):
    """Distillation of old-class probabilities where the student's new-class
    mass is absorbed into the background channel.

    ``probs_t`` is a constant (n, kt, h, w) probability array over background
    plus old classes; the student has kt or more channels.
    """
    probs_t = np.asarray(probs_t, dtype=np.float64)
    kt = probs_t.shape[1]
    ks = logits_s.data.shape[1]
    if ks < kt or probs_t.shape[0] != logits_s.data.shape[0] or probs_t.shape[2:] != logits_s.data.shape[2:]:
        raise ShapeError(f"teacher probs {probs_t.shape} incompatible with student logits {logits_s.data.shape}")
    if valid is None:
        valid = np.ones(probs_t.shape[:1] + probs_t.shape[2:], dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("loss undefined: every pixel carries the ignore label")
    e, z, logp = _softmax_parts(logits_s.data)
    e_bg = e[:, 0] + e[:, kt:].sum(axis=1)
    log_qbg = np.log(e_bg) - np.log(z[:, 0])
    per_pixel = probs_t[:, 0] * log_qbg + (probs_t[:, 1:kt] * logp[:, 1:kt]).sum(axis=1)
    loss = -per_pixel[valid].sum() / n_valid

    def bw(out):
        def run(g):
            p = e / z
            qbg = e_bg / z[:, 0]
            t_total = probs_t.sum(axis=1)
            t0_over_q = probs_t[:, 0] / qbg
            gx = p * t_total[:, None]
            gx[:, 0] -= p[:, 0] * t0_over_q
            gx[:, kt:] -= p[:, kt:] * t0_over_q[:, None]
            gx[:, 1:kt] -= probs_t[:, 1:kt]
            gx *= valid[:, None].astype(np.float64)
            logits_s.accumulate(gx * (float(g) / n_valid))
        return run

    return make(loss, (logits_s,), bw)
