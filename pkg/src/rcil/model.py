"""Toy encoder-decoder segmentation network built from two-branch blocks.

Three downsampling stages feed one decoder block; logits are produced by a
1x1 head on bilinearly upsampled decoder features.  The forward pass returns
the pre-activation feature map of each stage's last block plus the decoder's
(the distillation taps), so L = n_stages + 1.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tensor, no_grad, relu
from .kernels import ShapeError
from .layers import Conv2d
from .rcblock import (
    PlainBlock,
    RCBlock,
    fuse_conv_bn,
    merge_branches,
    sample_drop_path,
    step_transition,
)

HEAD_INIT_SHIFT = 0.1


@dataclass(frozen=True)
class StageSpec:
    n_blocks: int
    channels: int
    downsample: bool = True


DEFAULT_STAGES = (StageSpec(2, 16), StageSpec(2, 32), StageSpec(2, 64))


@dataclass(frozen=True)
class ArchSpec:
    stages: tuple = DEFAULT_STAGES
    decoder_channels: int = 32
    in_channels: int = 3


class SegNetwork:
    """Segmentation network whose head grows with the class count."""

    def __init__(self, arch, n_classes, rng, use_rc=True):
        self.arch = arch
        self.use_rc = use_rc
        block_cls = RCBlock if use_rc else PlainBlock
        self.stages = []
        in_ch = arch.in_channels
        for spec in arch.stages:
            blocks = []
            for i in range(spec.n_blocks):
                stride = 2 if (i == 0 and spec.downsample) else 1
                blocks.append(block_cls.fresh(in_ch, spec.channels, rng, stride=stride))
                in_ch = spec.channels
            self.stages.append(blocks)
        self.decoder = block_cls.fresh(in_ch, arch.decoder_channels, rng, stride=1)
        self.head = Conv2d(arch.decoder_channels, 1 + n_classes, ksize=1, padding=0, rng=rng)

    @property
    def n_classes(self):
        """Foreground classes the head can express (background excluded)."""
        return self.head.out_ch - 1

    def blocks(self):
        for stage in self.stages:
            yield from stage
        yield self.decoder

    def forward(self, x, training=False, drop_path_rng=None, batch_stats=True,
                drop_path_value=0.5):
        """Returns (logits, taps); logits match the input's spatial size.

        In training mode each block gets a fresh drop-path mask from
        ``drop_path_rng``; without an rng the blend is pinned at
        ``drop_path_value`` (0.5 is the no-drop-path ablation).
        """
        if x.data.shape[1] != self.arch.in_channels:
            raise ShapeError(
                f"expected {self.arch.in_channels} input channels, got {x.data.shape[1]}")
        hw = x.data.shape[2:]
        taps = []

        def run_block(block, inp):
            if training:
                if drop_path_rng is not None:
                    mask = sample_drop_path(drop_path_rng, block.out_ch)
                else:
                    mask = np.full(block.out_ch, drop_path_value)
                return block.forward(inp, training=True, mask=mask, batch_stats=batch_stats)
            return block.forward(inp, training=False)

        h = x
        for stage in self.stages:
            for block in stage:
                pre = run_block(block, h)
                h = relu(pre)
            taps.append(pre)
        pre = run_block(self.decoder, h)
        taps.append(pre)
        h = relu(pre)
        h = ops.upsample_bilinear(h, hw)
        logits = self.head(h)
        return logits, taps

    def predict(self, x):
        """Argmax class map under eval mode, without touching the tape."""
        with no_grad():
            logits, _ = self.forward(Tensor(x), training=False)
        return logits.data.argmax(axis=1)

    def parameters(self):
        params = []
        for block in self.blocks():
            params.extend(block.parameters())
        params.extend(p for p in self.head.parameters() if p.requires_grad)
        return params

    def freeze_all(self):
        for block in self.blocks():
            block.freeze()
        self.head.set_trainable(False)

    def clone(self):
        dup = SegNetwork.__new__(SegNetwork)
        dup.arch = self.arch
        dup.use_rc = self.use_rc
        dup.stages = [[b.clone() for b in stage] for stage in self.stages]
        dup.decoder = self.decoder.clone()
        dup.head = self.head.clone()
        return dup

    def state(self):
        st = {}
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                for k, v in block.state().items():
                    st[f"stage{si}.block{bi}.{k}"] = v
        for k, v in self.decoder.state().items():
            st[f"decoder.{k}"] = v
        for k, v in self.head.state().items():
            st[f"head.{k}"] = v
        return st

    def load_state(self, st):
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                prefix = f"stage{si}.block{bi}."
                block.load_state({k[len(prefix):]: v for k, v in st.items() if k.startswith(prefix)})
        self.decoder.load_state({k[8:]: v for k, v in st.items() if k.startswith("decoder.")})
        head_st = {k[5:]: v for k, v in st.items() if k.startswith("head.")}
        if head_st["weight"].shape != self.head.weight.data.shape:
            raise ShapeError("checkpoint head size differs from the constructed network")
        self.head.load_state(head_st)

    def state_hash(self):
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.state()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.state()[k]).tobytes())
        return h.hexdigest()

    def deploy(self):
        return DeployNetwork(self)


def extend_head(net, new_classes, shift=HEAD_INIT_SHIFT):
    """Widen the head by ``new_classes`` channels.

    Old rows are copied bit for bit; each new row copies the background row's
    weights with the bias lowered by ``shift`` so fresh classes start slightly
    less likely than background.
    """
    if new_classes < 1:
        raise ValueError("head extension needs at least one new class")
    old = net.head
    grown = Conv2d(old.in_ch, old.out_ch + new_classes, ksize=1, padding=0)
    w = np.concatenate(
        [old.weight.data] + [old.weight.data[:1]] * new_classes, axis=0)
    b = np.concatenate(
        [old.bias.data, np.full(new_classes, old.bias.data[0] - shift)])
    grown.weight = Tensor(w, requires_grad=True)
    grown.bias = Tensor(b, requires_grad=True)
    net.head = grown
    return net


@dataclass
class StepModel:
    student: "SegNetwork"
    teacher: "SegNetwork | None"


def make_step_model(prev, new_classes, merge=True, freeze=True, head_shift=HEAD_INIT_SHIFT):
    """Teacher = exact frozen copy of the previous network; student = previous
    network with every two-branch block passed through the step transition and
    the head extended for the incoming classes."""
    teacher = prev.clone()
    teacher.freeze_all()
    student = prev.clone()
    if student.use_rc:
        student.stages = [
            [step_transition(b, merge=merge, freeze=freeze) for b in stage]
            for stage in student.stages
        ]
        student.decoder = step_transition(student.decoder, merge=merge, freeze=freeze)
    if new_classes:
        extend_head(student, new_classes, shift=head_shift)
    return StepModel(student=student, teacher=teacher)


class DeployNetwork:
    """Inference-only network: every block collapsed to one convolution."""

    def __init__(self, net):
        def collapse(block):
            if isinstance(block, RCBlock):
                return merge_branches(block, (0.5, 0.5))
            return fuse_conv_bn(block.conv, block.norm)

        self.stage_convs = [[collapse(b) for b in stage] for stage in net.stages]
        self.decoder_conv = collapse(net.decoder)
        self.head = net.head.clone()
        self.in_channels = net.arch.in_channels

    def forward(self, x):
        hw = x.data.shape[2:]
        h = x
        for stage in self.stage_convs:
            for conv in stage:
                h = relu(conv(h))
        h = relu(self.decoder_conv(h))
        h = ops.upsample_bilinear(h, hw)
        return self.head(h)

    def parameter_count(self):
        convs = [c for stage in self.stage_convs for c in stage]
        convs += [self.decoder_conv, self.head]
        return sum(c.weight.data.size + c.bias.data.size for c in convs)
