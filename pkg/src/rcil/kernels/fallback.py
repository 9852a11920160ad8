"""Numpy implementations of the hot kernels.

Used when the compiled extension is unavailable (or explicitly disabled via
``RCIL_BACKEND=fallback``).  Convolutions go through strided window views and
einsum; pooling uses summed-area tables so large stride-1 windows stay O(H*W).
All reductions have a fixed order for a given build, so results are
reproducible run to run.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _window_view(xp, kh, kw, sh, sw, ho, wo):
    # read-only strided view of all (kh, kw) patches, shape (n, ci, ho, wo, kh, kw)
    n, ci = xp.shape[0], xp.shape[1]
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(n, ci, ho, wo, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
        writeable=False,
    )


def conv2d_forward(xp, w, b, sh, sw, ho, wo):
    """Correlate pre-padded input ``xp`` (n,ci,hp,wp) with ``w`` (co,ci,kh,kw)."""
    kh, kw = w.shape[2], w.shape[3]
    win = _window_view(xp, kh, kw, sh, sw, ho, wo)
    y = np.einsum("niyxpq,oipq->noyx", win, w, optimize=True)
    y += b[None, :, None, None]
    return np.ascontiguousarray(y)


def conv2d_backward(xp, w, gy, sh, sw):
    """Gradients w.r.t. padded input, weight and bias."""
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = gy.shape[2], gy.shape[3]
    win = _window_view(xp, kh, kw, sh, sw, ho, wo)
    gw = np.einsum("noyx,niyxpq->oipq", gy, win, optimize=True)
    gb = gy.sum(axis=(0, 2, 3))
    gxp = np.zeros_like(xp)
    # scatter one kernel offset at a time; each slice hits distinct cells
    for p in range(kh):
        for q in range(kw):
            contrib = np.einsum("noyx,oi->niyx", gy, w[:, :, p, q], optimize=True)
            gxp[:, :, p : p + sh * ho : sh, q : q + sw * wo : sw] += contrib
    return gxp, np.ascontiguousarray(gw), gb


def _sat(x):
    # summed-area table with a zero border, shape (n, c, H+1, W+1)
    n, c, h, w = x.shape
    s = np.zeros((n, c, h + 1, w + 1), dtype=x.dtype)
    s[:, :, 1:, 1:] = x.cumsum(axis=2).cumsum(axis=3)
    return s


def avgpool2d_forward(x, kh, kw, sh, sw):
    h, w = x.shape[2], x.shape[3]
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    if kh == 1 and kw == 1:
        # keep kernel-1 pooling bit-exact (the SAT path would round)
        return np.ascontiguousarray(x[:, :, ::sh, ::sw])
    s = _sat(x)
    ys = np.arange(ho) * sh
    xs = np.arange(wo) * sw
    y1, x1 = ys[:, None], xs[None, :]
    y2, x2 = y1 + kh, x1 + kw
    total = (
        s[:, :, y2, x2] - s[:, :, y1, x2] - s[:, :, y2, x1] + s[:, :, y1, x1]
    )
    return np.ascontiguousarray(total / (kh * kw))


def _cover_ranges(size_in, k, stride, size_out):
    """For each input index u, the [lo, hi] output-window range covering u."""
    u = np.arange(size_in)
    lo = np.maximum(0, np.ceil((u - k + 1) / stride)).astype(np.int64)
    hi = np.minimum(size_out - 1, u // stride)
    return lo, hi


def avgpool2d_backward(gy, h, w, kh, kw, sh, sw):
    ho, wo = gy.shape[2], gy.shape[3]
    if kh == 1 and kw == 1:
        gx = np.zeros(gy.shape[:2] + (h, w), dtype=gy.dtype)
        gx[:, :, ::sh, ::sw] = gy
        return gx
    s = _sat(gy)
    ylo, yhi = _cover_ranges(h, kh, sh, ho)
    xlo, xhi = _cover_ranges(w, kw, sw, wo)
    y1, y2 = ylo[:, None], (yhi + 1)[:, None]
    x1, x2 = xlo[None, :], (xhi + 1)[None, :]
    gx = s[:, :, y2, x2] - s[:, :, y1, x2] - s[:, :, y2, x1] + s[:, :, y1, x1]
    # cells not covered by any window (possible when stride > kernel)
    empty = (yhi < ylo)[:, None] | (xhi < xlo)[None, :]
    if empty.any():
        gx[:, :, empty] = 0.0
    return np.ascontiguousarray(gx / (kh * kw))


def channel_avgpool_forward(x, k, stride):
    c = x.shape[1]
    co = (c - k) // stride + 1
    s = np.zeros((x.shape[0], c + 1) + x.shape[2:], dtype=x.dtype)
    s[:, 1:] = x.cumsum(axis=1)
    js = np.arange(co) * stride
    return np.ascontiguousarray((s[:, js + k] - s[:, js]) / k)


def channel_avgpool_backward(gy, c, k, stride):
    co = gy.shape[1]
    s = np.zeros((gy.shape[0], co + 1) + gy.shape[2:], dtype=gy.dtype)
    s[:, 1:] = gy.cumsum(axis=1)
    lo, hi = _cover_ranges(c, k, stride, co)
    gx = s[:, hi + 1] - s[:, lo]
    empty = hi < lo
    if empty.any():
        gx[:, empty] = 0.0
    return np.ascontiguousarray(gx / k)


def maxpool2d_forward(x, kh, kw, sh, sw):
    h, w = x.shape[2], x.shape[3]
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    y = np.full(x.shape[:2] + (ho, wo), -np.inf, dtype=x.dtype)
    for p in range(kh):
        for q in range(kw):
            np.maximum(y, x[:, :, p : p + sh * ho : sh, q : q + sw * wo : sw], out=y)
    return y


def maxpool2d_backward(x, y, gy, kh, kw, sh, sw):
    ho, wo = gy.shape[2], gy.shape[3]
    gx = np.zeros_like(x)
    claimed = np.zeros_like(gy, dtype=bool)
    # ties resolved to the first matching offset in (p, q) scan order
    for p in range(kh):
        for q in range(kw):
            sl = (slice(None), slice(None), slice(p, p + sh * ho, sh), slice(q, q + sw * wo, sw))
            hit = (x[sl] == y) & ~claimed
            gx[sl] += gy * hit
            claimed |= hit
    return gx
