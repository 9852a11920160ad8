"""Parameter-holding layers: convolution and batch normalization.

Layers are plain containers over :class:`~rcil.autograd.Tensor` parameters.
``clone()`` deep-copies every array so teacher snapshots and step transitions
never alias training state.
"""

import numpy as np

from . import ops
from .autograd import Tensor

BN_EPS_DEFAULT = 1e-5
BN_MOMENTUM_DEFAULT = 0.1


class Conv2d:
    """2-d convolution with odd square kernels and symmetric padding."""

    def __init__(self, in_ch, out_ch, ksize=3, stride=1, padding=None, rng=None):
        if padding is None:
            if ksize % 2 == 0:
                raise ValueError("same-padding convolution needs an odd kernel")
            padding = ksize // 2
        self.in_ch, self.out_ch = in_ch, out_ch
        self.ksize, self.stride, self.padding = ksize, stride, padding
        if rng is None:
            w = np.zeros((out_ch, in_ch, ksize, ksize))
        else:
            std = np.sqrt(2.0 / (in_ch * ksize * ksize))
            w = rng.standard_normal((out_ch, in_ch, ksize, ksize)) * std
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True)

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self):
        return [self.weight, self.bias]

    def set_trainable(self, flag):
        self.weight.requires_grad = flag
        self.bias.requires_grad = flag

    def clone(self):
        c = Conv2d(self.in_ch, self.out_ch, self.ksize, self.stride, self.padding)
        c.weight = Tensor(self.weight.data.copy(), requires_grad=self.weight.requires_grad)
        c.bias = Tensor(self.bias.data.copy(), requires_grad=self.bias.requires_grad)
        return c

    def state(self):
        return {"weight": self.weight.data, "bias": self.bias.data}

    def load_state(self, st):
        self.weight.data = st["weight"].astype(np.float64).copy()
        self.bias.data = st["bias"].astype(np.float64).copy()


class BatchNorm2d:
    """Batch normalization with running statistics.

    eps participates in every downstream fusion, so it is part of the layer
    state and round-trips through checkpoints.
    """

    def __init__(self, ch, eps=BN_EPS_DEFAULT, momentum=BN_MOMENTUM_DEFAULT):
        self.ch = ch
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = Tensor(np.ones(ch), requires_grad=True)
        self.beta = Tensor(np.zeros(ch), requires_grad=True)
        self.running_mean = np.zeros(ch)
        self.running_var = np.ones(ch)

    @classmethod
    def identity(cls, ch):
        """A no-op norm: gamma=1, beta=0, mean=0, var=1, eps=0."""
        bn = cls(ch, eps=0.0)
        return bn

    def __call__(self, x, training):
        return ops.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.eps, self.momentum, training,
        )

    def parameters(self):
        return [self.gamma, self.beta]

    def set_trainable(self, flag):
        self.gamma.requires_grad = flag
        self.beta.requires_grad = flag

    def clone(self):
        bn = BatchNorm2d(self.ch, self.eps, self.momentum)
        bn.gamma = Tensor(self.gamma.data.copy(), requires_grad=self.gamma.requires_grad)
        bn.beta = Tensor(self.beta.data.copy(), requires_grad=self.beta.requires_grad)
        bn.running_mean = self.running_mean.copy()
        bn.running_var = self.running_var.copy()
        return bn

    def state(self):
        return {
            "gamma": self.gamma.data,
            "beta": self.beta.data,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
            "eps": np.array(self.eps),
            "momentum": np.array(self.momentum),
        }

    def load_state(self, st):
        self.gamma.data = st["gamma"].astype(np.float64).copy()
        self.beta.data = st["beta"].astype(np.float64).copy()
        self.running_mean = st["running_mean"].astype(np.float64).copy()
        self.running_var = st["running_var"].astype(np.float64).copy()
        self.eps = float(st["eps"])
        self.momentum = float(st["momentum"])
