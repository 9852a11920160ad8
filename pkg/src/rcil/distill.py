"""Feature distillation between teacher and student taps.

The main loss squares each feature map (sign information survives as
magnitude), average-pools it over multi-scale spatial windows and over
channel windows, and penalizes the per-sample L2 distance between the pooled
teacher and student cubes.  Ablation variants swap the pooling operator:
strips, max, global average, or none.

Kernels larger than the pooled extent are skipped and the kernel-count
normalizer shrinks accordingly; a layer where nothing applies contributes 0.
"""

from dataclasses import dataclass, field

from . import autograd as ag
from . import ops
from .autograd import Tensor
from .kernels import ShapeError

SPATIAL_KERNELS_DEFAULT = (4, 8, 12, 16, 20, 24)
CHANNEL_KERNELS_DEFAULT = (3,)


@dataclass(frozen=True)
class PoolSpec:
    spatial_kernels: tuple = SPATIAL_KERNELS_DEFAULT
    spatial_stride: int = 1
    channel_kernels: tuple = CHANNEL_KERNELS_DEFAULT
    channel_stride: int = 1


@dataclass(frozen=True)
class DistillConfig:
    variant: str = "avg_cube"  # avg_cube | strip | max | gap | none
    pool: PoolSpec = field(default_factory=PoolSpec)
    layer_mask: tuple = None  # None selects every tap
    cascade: bool = False  # feed each kernel the previous kernel's output

    def mask_for(self, n_layers):
        if self.layer_mask is None:
            return (True,) * n_layers
        if len(self.layer_mask) != n_layers:
            raise ShapeError(f"layer mask length {len(self.layer_mask)} != tap count {n_layers}")
        return tuple(bool(m) for m in self.layer_mask)


def pooled_square(x, kernel, stride=1, axis="spatial"):
    """Square then average-pool along ``axis``.

    Returns None when the kernel exceeds the pooled extent (skip semantics).
    """
    if axis == "spatial":
        if kernel > min(x.data.shape[2], x.data.shape[3]):
            return None
        return ops.avg_pool2d(ag.square(x), kernel, stride)
    if axis == "channel":
        if kernel > x.data.shape[1]:
            return None
        return ops.channel_avg_pool(ag.square(x), kernel, stride)
    raise ValueError(f"unknown pooling axis {axis!r}")


def _check_taps(taps_t, taps_s):
    if len(taps_t) != len(taps_s):
        raise ShapeError(f"tap list lengths differ: {len(taps_t)} vs {len(taps_s)}")
    for i, (a, b) in enumerate(zip(taps_t, taps_s)):
        if a.data.shape != b.data.shape:
            raise ShapeError(f"tap {i} shapes differ: {a.data.shape} vs {b.data.shape}")


def _per_sample_l2(diff):
    """sqrt of the summed squared entries, per sample, then batch mean."""
    total = ag.square(diff).sum(axis=tuple(range(1, diff.data.ndim)))
    return ag.sqrt(total).mean()


def _mean_terms(terms):
    if not terms:
        return Tensor(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def _spatial_layer_terms(tap_t, tap_s, kernels, stride, cascade, pool_fn):
    terms = []
    if cascade:
        cur_t, cur_s = ag.square(tap_t), ag.square(tap_s)
        for k in kernels:
            if k > min(cur_t.data.shape[2], cur_t.data.shape[3]):
                continue
            # the cascaded form reuses the pooled map and strides by the kernel
            cur_t = pool_fn(cur_t, k, k)
            cur_s = pool_fn(cur_s, k, k)
            terms.append(_per_sample_l2(cur_s - cur_t))
        return terms
    sq_t, sq_s = ag.square(tap_t), ag.square(tap_s)
    for k in kernels:
        if k > min(tap_t.data.shape[2], tap_t.data.shape[3]):
            continue
        terms.append(_per_sample_l2(pool_fn(sq_s, k, stride) - pool_fn(sq_t, k, stride)))
    return terms


def skd_loss(taps_t, taps_s, cfg):
    """Spatial distillation: multi-scale square windows, averaged over the
    applied kernels and the enabled layers."""
    _check_taps(taps_t, taps_s)
    enabled = cfg.mask_for(len(taps_t))
    layer_losses = []
    for on, tt, ts in zip(enabled, taps_t, taps_s):
        if not on:
            continue
        terms = _spatial_layer_terms(
            tt.detach(), ts, cfg.pool.spatial_kernels, cfg.pool.spatial_stride,
            cfg.cascade, ops.avg_pool2d,
        )
        layer_losses.append(_mean_terms(terms))
    return _mean_terms(layer_losses)


def ckd_loss(taps_t, taps_s, cfg):
    """Channel distillation: pooling windows slide over the channel axis at
    every spatial position."""
    _check_taps(taps_t, taps_s)
    enabled = cfg.mask_for(len(taps_t))
    layer_losses = []
    for on, tt, ts in zip(enabled, taps_t, taps_s):
        if not on:
            continue
        terms = []
        for k in cfg.pool.channel_kernels:
            pt = pooled_square(tt.detach(), k, cfg.pool.channel_stride, axis="channel")
            ps = pooled_square(ts, k, cfg.pool.channel_stride, axis="channel")
            if pt is None:
                continue
            terms.append(_per_sample_l2(ps - pt))
        layer_losses.append(_mean_terms(terms))
    return _mean_terms(layer_losses)


def pcd_loss(taps_t, taps_s, cfg):
    """Spatial plus channel distillation over the enabled layers."""
    return skd_loss(taps_t, taps_s, cfg) + ckd_loss(taps_t, taps_s, cfg)


def strip_pool_loss(taps_t, taps_s, cfg=None):
    """Ablation variant: squared features pooled to one row and one column
    vector per map; the two L2 terms are summed."""
    cfg = cfg or DistillConfig(variant="strip")
    _check_taps(taps_t, taps_s)
    enabled = cfg.mask_for(len(taps_t))
    layer_losses = []
    for on, tt, ts in zip(enabled, taps_t, taps_s):
        if not on:
            continue
        h, w = tt.data.shape[2], tt.data.shape[3]
        sq_t, sq_s = ag.square(tt.detach()), ag.square(ts)
        row_t = ops.avg_pool2d(sq_t, (h, 1), (1, 1))
        row_s = ops.avg_pool2d(sq_s, (h, 1), (1, 1))
        col_t = ops.avg_pool2d(sq_t, (1, w), (1, 1))
        col_s = ops.avg_pool2d(sq_s, (1, w), (1, 1))
        layer_losses.append(_per_sample_l2(row_s - row_t) + _per_sample_l2(col_s - col_t))
    return _mean_terms(layer_losses)


def max_pool_loss(taps_t, taps_s, cfg):
    """Ablation variant: the multi-scale windows take the max instead of the
    mean (features are squared first, like every variant here)."""
    _check_taps(taps_t, taps_s)
    enabled = cfg.mask_for(len(taps_t))
    layer_losses = []
    for on, tt, ts in zip(enabled, taps_t, taps_s):
        if not on:
            continue
        terms = _spatial_layer_terms(
            tt.detach(), ts, cfg.pool.spatial_kernels, cfg.pool.spatial_stride,
            cfg.cascade, ops.max_pool2d,
        )
        layer_losses.append(_mean_terms(terms))
    return _mean_terms(layer_losses)


def gap_loss(taps_t, taps_s, cfg=None):
    """Ablation variant: one global average per channel."""
    cfg = cfg or DistillConfig(variant="gap")
    _check_taps(taps_t, taps_s)
    enabled = cfg.mask_for(len(taps_t))
    layer_losses = []
    for on, tt, ts in zip(enabled, taps_t, taps_s):
        if not on:
            continue
        h, w = tt.data.shape[2], tt.data.shape[3]
        pt = ops.avg_pool2d(ag.square(tt.detach()), (h, w), (1, 1))
        ps = ops.avg_pool2d(ag.square(ts), (h, w), (1, 1))
        layer_losses.append(_per_sample_l2(ps - pt))
    return _mean_terms(layer_losses)


def no_pool_loss(taps_t, taps_s, cfg=None):
    """Ablation variant: direct L2 between squared feature maps."""
    cfg = cfg or DistillConfig(variant="none")
    _check_taps(taps_t, taps_s)
    enabled = cfg.mask_for(len(taps_t))
    layer_losses = []
    for on, tt, ts in zip(enabled, taps_t, taps_s):
        if not on:
            continue
        layer_losses.append(_per_sample_l2(ag.square(ts) - ag.square(tt.detach())))
    return _mean_terms(layer_losses)


def distill_loss(taps_t, taps_s, cfg):
    """Variant dispatcher used by the training loop."""
    variant = cfg.variant
    if variant == "avg_cube":
        return pcd_loss(taps_t, taps_s, cfg)
    if variant == "strip":
        return strip_pool_loss(taps_t, taps_s, cfg)
    if variant == "max":
        return max_pool_loss(taps_t, taps_s, cfg)
    if variant == "gap":
        return gap_loss(taps_t, taps_s, cfg)
    if variant == "none":
        return no_pool_loss(taps_t, taps_s, cfg)
    raise ValueError(f"unknown distillation variant {variant!r}")
