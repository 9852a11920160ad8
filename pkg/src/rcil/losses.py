"""Continual-learning objectives over a contiguous channel layout.

Channel 0 is background; previously learned classes occupy channels
1..n_old and the current step's classes follow.  The protocol layer owns the
mapping from raw class ids to channels, so everything here can reason about
contiguous ranges.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tensor
from .kernels import ShapeError

IGNORE_LABEL = 255


@dataclass(frozen=True)
class ClassPartition:
    """Channel-space split: background 0, old classes, then new classes."""

    n_old: int
    n_new: int

    def __post_init__(self):
        if self.n_old < 0 or self.n_new < 0:
            raise ValueError("class counts must be non-negative")

    @property
    def background(self):
        return 0

    @property
    def old(self):
        return frozenset(range(1, 1 + self.n_old))

    @property
    def new(self):
        return frozenset(range(1 + self.n_old, 1 + self.n_old + self.n_new))

    @property
    def n_channels(self):
        return 1 + self.n_old + self.n_new


@dataclass(frozen=True)
class LossWeights:
    lam: float = 100.0
    gamma: float = 0.01

    def __post_init__(self):
        if self.lam <= 0 or self.gamma <= 0:
            raise ValueError("loss weights must be positive")


def unce_loss(logits_s, labels, part):
    """Cross-entropy for the current step where the background channel
    absorbs every old class's probability; labels may only carry background,
    current-step channels, or the ignore value."""
    if logits_s.data.shape[1] != part.n_channels:
        raise ShapeError(
            f"logits have {logits_s.data.shape[1]} channels, partition expects {part.n_channels}")
    return ops.unbiased_ce(logits_s, labels, n_absorb=1 + part.n_old, ignore_label=IGNORE_LABEL)


def unkd_loss(logits_s, logits_t, part, labels=None):
    """Distillation of the teacher's background+old distribution where the
    student's new-class mass folds into background."""
    t_data = logits_t.data if isinstance(logits_t, Tensor) else np.asarray(logits_t)
    if t_data.shape[1] != 1 + part.n_old:
        raise ShapeError(
            f"teacher has {t_data.shape[1]} channels, expected {1 + part.n_old}")
    if logits_s.data.shape[1] != part.n_channels:
        raise ShapeError(
            f"student has {logits_s.data.shape[1]} channels, expected {part.n_channels}")
    m = t_data.max(axis=1, keepdims=True)
    e = np.exp(t_data - m)
    probs_t = e / e.sum(axis=1, keepdims=True)
    valid = None if labels is None else np.asarray(labels) != IGNORE_LABEL
    return ops.unbiased_kd(logits_s, probs_t, valid=valid)


def plain_kd_loss(logits_s, logits_t, labels=None):
    """Baseline logit distillation without background absorption: teacher
    softmax against the student's log-softmax over the shared channel prefix."""
    t_data = logits_t.data if isinstance(logits_t, Tensor) else np.asarray(logits_t)
    kt = t_data.shape[1]
    if logits_s.data.shape[1] < kt:
        raise ShapeError(
            f"student has {logits_s.data.shape[1]} channels, teacher needs {kt}")
    m = t_data.max(axis=1, keepdims=True)
    e = np.exp(t_data - m)
    probs_t = e / e.sum(axis=1, keepdims=True)
    ls = ops.log_softmax_channels(ops.narrow_channels(logits_s, 0, kt))
    per_pixel = (ls * Tensor(probs_t)).sum(axis=1)
    if labels is None:
        return -per_pixel.mean()
    valid = (np.asarray(labels) != IGNORE_LABEL).astype(np.float64)
    n_valid = valid.sum()
    if n_valid == 0:
        raise ValueError("loss undefined: every pixel carries the ignore label")
    return (per_pixel * Tensor(valid)).sum() * (-1.0 / n_valid)


def adaptive_factor(part, count_background=False):
    """sqrt(all classes / current-step classes); with ``count_background``
    both counts include the background channel."""
    if part.n_new == 0:
        raise ValueError("current step has no classes; the adaptive factor is undefined")
    extra = 1 if count_background else 0
    return float(np.sqrt((part.n_old + part.n_new + extra) / (part.n_new + extra)))


def total_loss(unce, unkd, skd, ckd, part, weights, count_background=False):
    """unce + lambda * factor * unkd + gamma * (skd + ckd).

    Teacher-dependent terms are None at step 0 and contribute nothing.
    """
    total = unce
    if unkd is not None:
        total = total + unkd * (weights.lam * adaptive_factor(part, count_background))
    distill_sum = None
    for term in (skd, ckd):
        if term is not None:
            distill_sum = term if distill_sum is None else distill_sum + term
    if distill_sum is not None:
        total = total + distill_sum * weights.gamma
    return total
