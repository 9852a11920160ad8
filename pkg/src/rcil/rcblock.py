"""Two-branch conv+norm blocks with exact single-conv merging.

The block runs two parallel conv -> norm branches whose pre-activation
outputs are blended channel-wise.  During training the blend weights come
from a drop-path vector with entries in {0, 0.5, 1}; at inference both
branches weigh 0.5.  Because normalization is affine against fixed
statistics, the two branches collapse algebraically into one convolution,
which is what each step transition freezes to preserve the previous step's
function.
"""

import numpy as np

from .autograd import Tensor
from .kernels import ShapeError
from .layers import BatchNorm2d, Conv2d

DROP_PATH_LEVELS = (0.0, 0.5, 1.0)


def sample_drop_path(rng, channels):
    """Channel-wise blend vector, each entry uniform over {0, 0.5, 1}."""
    return rng.integers(0, 3, size=channels) * 0.5


class RCBranch:
    """One conv+norm pair.

    ``use_batch_stats=False`` pins normalization to the running statistics
    even while the affine parameters train; merged branches rely on this so
    their identity norm stays exact.
    """

    def __init__(self, conv, norm, trainable=True, use_batch_stats=True):
        self.conv = conv
        self.norm = norm
        self.trainable = trainable
        self.use_batch_stats = use_batch_stats
        self._apply_trainable()

    def _apply_trainable(self):
        self.conv.set_trainable(self.trainable)
        self.norm.set_trainable(self.trainable)

    def forward(self, x, training, batch_stats=True):
        bn_training = training and self.trainable and self.use_batch_stats and batch_stats
        return self.norm(self.conv(x), training=bn_training)

    def freeze(self):
        self.trainable = False
        self._apply_trainable()

    def parameters(self):
        if not self.trainable:
            return []
        return self.conv.parameters() + self.norm.parameters()

    def clone(self):
        return RCBranch(self.conv.clone(), self.norm.clone(), self.trainable, self.use_batch_stats)

    def state(self):
        st = {f"conv.{k}": v for k, v in self.conv.state().items()}
        st.update({f"norm.{k}": v for k, v in self.norm.state().items()})
        st["trainable"] = np.array(int(self.trainable))
        st["use_batch_stats"] = np.array(int(self.use_batch_stats))
        return st

    def load_state(self, st):
        self.conv.load_state({k[5:]: v for k, v in st.items() if k.startswith("conv.")})
        self.norm.load_state({k[5:]: v for k, v in st.items() if k.startswith("norm.")})
        self.trainable = bool(int(st["trainable"]))
        self.use_batch_stats = bool(int(st["use_batch_stats"]))
        self._apply_trainable()


class RCBlock:
    """Parallel-branch block; output here is pre-activation."""

    def __init__(self, branch_a, branch_b):
        ca, cb = branch_a.conv, branch_b.conv
        if (ca.in_ch, ca.out_ch, ca.ksize, ca.stride, ca.padding) != (
            cb.in_ch, cb.out_ch, cb.ksize, cb.stride, cb.padding
        ):
            raise ShapeError("branches must share the conv hyper-shape")
        self.branch_a = branch_a
        self.branch_b = branch_b

    @classmethod
    def fresh(cls, in_ch, out_ch, rng, ksize=3, stride=1):
        """Step-0 block: both branches trainable."""
        make = lambda: RCBranch(Conv2d(in_ch, out_ch, ksize, stride, rng=rng), BatchNorm2d(out_ch))
        return cls(make(), make())

    @property
    def out_ch(self):
        return self.branch_a.conv.out_ch

    @property
    def stride(self):
        return self.branch_a.conv.stride

    def forward_train(self, x, mask, batch_stats=True):
        """Blend eta*branch_a + (1-eta)*branch_b with a fresh drop-path mask."""
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (self.out_ch,):
            raise ShapeError(f"drop-path mask length {mask.shape} != out channels {self.out_ch}")
        xa = self.branch_a.forward(x, training=True, batch_stats=batch_stats)
        xb = self.branch_b.forward(x, training=True, batch_stats=batch_stats)
        eta = Tensor(mask.reshape(1, -1, 1, 1))
        return xa * eta + xb * (1.0 - eta)

    def forward_eval(self, x):
        xa = self.branch_a.forward(x, training=False)
        xb = self.branch_b.forward(x, training=False)
        return xa * 0.5 + xb * 0.5

    def forward(self, x, training, mask=None, batch_stats=True):
        if training:
            if mask is None:
                raise ValueError("training forward needs a drop-path mask")
            return self.forward_train(x, mask, batch_stats)
        return self.forward_eval(x)

    def parameters(self):
        return self.branch_a.parameters() + self.branch_b.parameters()

    def clone(self):
        return RCBlock(self.branch_a.clone(), self.branch_b.clone())

    def freeze(self):
        self.branch_a.freeze()
        self.branch_b.freeze()

    def state(self):
        st = {f"a.{k}": v for k, v in self.branch_a.state().items()}
        st.update({f"b.{k}": v for k, v in self.branch_b.state().items()})
        return st

    def load_state(self, st):
        self.branch_a.load_state({k[2:]: v for k, v in st.items() if k.startswith("a.")})
        self.branch_b.load_state({k[2:]: v for k, v in st.items() if k.startswith("b.")})


def fuse_conv_bn(conv, norm):
    """Fold eval-mode normalization into the convolution.

    weight' = (gamma/sigma) * W per output channel and
    bias' = (gamma*b - gamma*mu)/sigma + beta, with sigma = sqrt(var + eps).
    """
    sigma = np.sqrt(norm.running_var + norm.eps)
    scale = norm.gamma.data / sigma
    fused = Conv2d(conv.in_ch, conv.out_ch, conv.ksize, conv.stride, conv.padding)
    fused.weight = Tensor(conv.weight.data * scale[:, None, None, None], requires_grad=True)
    fused.bias = Tensor(scale * (conv.bias.data - norm.running_mean) + norm.beta.data,
                        requires_grad=True)
    return fused


def merge_branches(block, weights=(0.5, 0.5)):
    """Collapse both branches into one convolution: the weighted sum of the
    two conv+norm fusions (uses running statistics)."""
    wa, wb = weights
    fa = fuse_conv_bn(block.branch_a.conv, block.branch_a.norm)
    fb = fuse_conv_bn(block.branch_b.conv, block.branch_b.norm)
    merged = Conv2d(fa.in_ch, fa.out_ch, fa.ksize, fa.stride, fa.padding)
    merged.weight = Tensor(wa * fa.weight.data + wb * fb.weight.data, requires_grad=True)
    merged.bias = Tensor(wa * fa.bias.data + wb * fb.bias.data, requires_grad=True)
    return merged


def step_transition(block, merge=True, freeze=True, merge_weights=(0.5, 0.5)):
    """Build the next step's block from a trained one.

    Default: branch_a becomes the merged convolution (wrapped in an identity
    norm) and is frozen to keep the previous step's inference function;
    branch_b continues training from its previous-step parameters, running
    statistics included.  ``merge``/``freeze`` can be relaxed for ablations.
    """
    if not merge:
        return RCBlock(block.branch_a.clone(), block.branch_b.clone())
    merged_conv = merge_branches(block, merge_weights)
    branch_a = RCBranch(
        merged_conv,
        BatchNorm2d.identity(block.out_ch),
        trainable=not freeze,
        use_batch_stats=False,
    )
    return RCBlock(branch_a, block.branch_b.clone())


class PlainBlock:
    """Single conv+norm block for the non-reparameterized baselines.

    Mirrors the RCBlock interface; drop-path masks are accepted and ignored
    so the training loop stays uniform.
    """

    def __init__(self, conv, norm, trainable=True):
        self.conv = conv
        self.norm = norm
        self.trainable = trainable

    @classmethod
    def fresh(cls, in_ch, out_ch, rng, ksize=3, stride=1):
        return cls(Conv2d(in_ch, out_ch, ksize, stride, rng=rng), BatchNorm2d(out_ch))

    @property
    def out_ch(self):
        return self.conv.out_ch

    @property
    def stride(self):
        return self.conv.stride

    def forward(self, x, training, mask=None, batch_stats=True):
        return self.norm(self.conv(x), training=training and self.trainable and batch_stats)

    def parameters(self):
        if not self.trainable:
            return []
        return self.conv.parameters() + self.norm.parameters()

    def clone(self):
        b = PlainBlock(self.conv.clone(), self.norm.clone(), self.trainable)
        return b

    def freeze(self):
        self.trainable = False
        self.conv.set_trainable(False)
        self.norm.set_trainable(False)

    def state(self):
        st = {f"conv.{k}": v for k, v in self.conv.state().items()}
        st.update({f"norm.{k}": v for k, v in self.norm.state().items()})
        return st

    def load_state(self, st):
        self.conv.load_state({k[5:]: v for k, v in st.items() if k.startswith("conv.")})
        self.norm.load_state({k[5:]: v for k, v in st.items() if k.startswith("norm.")})
