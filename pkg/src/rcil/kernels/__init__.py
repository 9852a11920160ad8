"""Kernel dispatch: compiled core when available, numpy fallback otherwise.

The backend is chosen once at import.  ``RCIL_BACKEND=fallback`` forces the
numpy path, ``RCIL_BACKEND=native`` makes a missing extension a hard error.
Channel pooling and max pooling are cheap and only exist in the fallback
module; the dispatcher routes them there for both backends.

A process-wide multiply-accumulate counter can be armed with
:func:`count_macs`; conv calls report their MAC volume to it regardless of
backend.  Single-threaded use is the contract.
"""

import os
from contextlib import contextmanager

import numpy as np

from . import fallback

_requested = os.environ.get("RCIL_BACKEND", "auto")
if _requested == "fallback":
    _native = None
else:
    try:
        from . import _native
    except ImportError:
        if _requested == "native":
            raise
        _native = None

BACKEND = "native" if _native is not None else "fallback"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class _MacCounter:
    def __init__(self):
        self.active = False
        self.macs = 0
        self.conv_calls = 0

    def reset(self):
        self.macs = 0
        self.conv_calls = 0


_counter = _MacCounter()


@contextmanager
def count_macs():
    """Arm the MAC counter; yields the counter object."""
    _counter.reset()
    _counter.active = True
    try:
        yield _counter
    finally:
        _counter.active = False


def _as_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _conv_out_size(h, w, kh, kw, sh, sw, ph, pw):
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel ({kh},{kw}) with padding ({ph},{pw}) exceeds input ({h},{w})")
    return ho, wo


def conv2d_forward(x, w, b, stride=(1, 1), padding=(0, 0)):
    """Cross-correlate (n,ci,h,w) with (co,ci,kh,kw) plus bias (co,)."""
    x, w, b = _as_f64(x), _as_f64(w), _as_f64(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects rank-4 input and weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input channels {x.shape[1]} != weight channels {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} != ({w.shape[0]},)")
    sh, sw = stride
    ph, pw = padding
    ho, wo = _conv_out_size(x.shape[2], x.shape[3], w.shape[2], w.shape[3], sh, sw, ph, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    if _counter.active:
        _counter.conv_calls += 1
        _counter.macs += x.shape[0] * w.shape[0] * ho * wo * x.shape[1] * w.shape[2] * w.shape[3]
    impl = _native if _native is not None else fallback
    return impl.conv2d_forward(_as_f64(xp), w, b, sh, sw, ho, wo)


def conv2d_backward(x, w, gy, stride=(1, 1), padding=(0, 0)):
    """Gradients (gx, gw, gb) of conv2d_forward."""
    x, w, gy = _as_f64(x), _as_f64(w), _as_f64(gy)
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    impl = _native if _native is not None else fallback
    gxp, gw, gb = impl.conv2d_backward(_as_f64(xp), w, _as_f64(gy), sh, sw)
    if ph or pw:
        gx = gxp[:, :, ph : ph + x.shape[2], pw : pw + x.shape[3]]
    else:
        gx = gxp
    return np.ascontiguousarray(gx), gw, gb


def _check_pool(x, kh, kw, sh, sw):
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise ShapeError("kernel and stride must be positive")
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(f"pool kernel ({kh},{kw}) larger than input ({x.shape[2]},{x.shape[3]})")


def avgpool2d_forward(x, kernel, stride):
    # summed-area implementation is O(H*W) for any kernel; used by both backends
    x = _as_f64(x)
    kh, kw = kernel
    sh, sw = stride
    _check_pool(x, kh, kw, sh, sw)
    return fallback.avgpool2d_forward(x, kh, kw, sh, sw)


def avgpool2d_backward(gy, input_hw, kernel, stride):
    gy = _as_f64(gy)
    h, w = input_hw
    kh, kw = kernel
    sh, sw = stride
    return fallback.avgpool2d_backward(gy, h, w, kh, kw, sh, sw)


def channel_avgpool_forward(x, k, stride=1):
    x = _as_f64(x)
    if k > x.shape[1]:
        raise ShapeError(f"channel kernel {k} larger than channel count {x.shape[1]}")
    return fallback.channel_avgpool_forward(x, k, stride)


def channel_avgpool_backward(gy, c, k, stride=1):
    return fallback.channel_avgpool_backward(_as_f64(gy), c, k, stride)


def maxpool2d_forward(x, kernel, stride):
    x = _as_f64(x)
    kh, kw = kernel
    sh, sw = stride
    _check_pool(x, kh, kw, sh, sw)
    return fallback.maxpool2d_forward(x, kh, kw, sh, sw)


def maxpool2d_backward(x, y, gy, kernel, stride):
    kh, kw = kernel
    sh, sw = stride
    return fallback.maxpool2d_backward(_as_f64(x), _as_f64(y), _as_f64(gy), kh, kw, sh, sw)
