"""Fusion blocks: the dual-way fusion block (DFB) mixing both branch
outputs of a stage, the stage block (DFFB) that runs the transformer and
convolutional branches in parallel, and the feature-reuse block (FRB)
applied to the sum of all stage features before reconstruction.

DFB and FRB share a progressive cascade: the entry projection's output is
split into equal channel groups; each group is convolved after adding the
previous branch's output, the last branch passes through channel
attention, and a 1x1 convolution fuses the concatenated branches.
"""

from __future__ import annotations

from typing import List

from . import layers as L
from . import tensor as T
from .attention import ATB
from .conv_branch import SESAB, ChannelAttention, default_ca_ratio
from .init import make_conv
from .layers import Block
from .tensor import ShapeMismatch, Tensor


class _ProgressiveCascade(Block):
    """Split / progressive-convolve / channel-attend / fuse core."""

    def __init__(self, rng, channels: int, branches: int, dtype):
        if branches < 2:
            raise ValueError(f"cascade needs at least 2 branches, got {branches}")
        if channels % branches != 0:
            raise ValueError(f"channels {channels} not divisible by branches {branches}")
        cb = channels // branches
        convs = [make_conv(rng, cb, cb, 1, dtype)]
        convs += [make_conv(rng, cb, cb, 3, dtype, padding=1) for _ in range(branches - 1)]
        self.branch_convs = convs
        self.branch_ca = ChannelAttention(rng, cb, default_ca_ratio(cb), dtype)
        self.fuse = make_conv(rng, channels, channels, 1, dtype)
        self.branches = branches
        self.branch_channels = cb

    def forward(self, z: Tensor) -> Tensor:
        cb = self.branch_channels
        outs = []
        y = None
        for k, conv in enumerate(self.branch_convs):
            g = T.narrow(z, 1, k * cb, cb)
            y = L.conv2d(g if y is None else T.add(g, y), conv)
            if k == self.branches - 1:
                y = self.branch_ca.forward(y)
            outs.append(y)
        return L.conv2d(T.concat(outs, axis=1), self.fuse)


class DFB(Block):
    """Dual-way fusion: concat both branches, run the cascade, add both
    inputs back so zero-initialized parameters give out = a + b exactly."""

    def __init__(self, rng, channels: int, branches: int, dtype):
        self.entry = make_conv(rng, 2 * channels, channels, 1, dtype)
        self.cascade = _ProgressiveCascade(rng, channels, branches, dtype)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeMismatch(f"fusion inputs differ in shape: {a.shape} vs {b.shape}")
        z = L.conv2d(T.concat([a, b], axis=1), self.entry)
        return T.add(T.add(self.cascade.forward(z), a), b)


class DFFB(Block):
    """One network stage: transformer branch and convolutional branch run on
    the same input, then fuse."""

    def __init__(self, rng, channels: int, heads: int, window: int, stripe: int,
                 gconv_groups: int, ca_ratio: int, serb_count: int, atb_depth: int,
                 branches: int, dtype, mlp_ratio: int = 2, bias_span: int = 32):
        self.atb = ATB(rng, channels, heads, window, stripe, dtype,
                       depth=atb_depth, mlp_ratio=mlp_ratio, bias_span=bias_span)
        self.sesab = SESAB(rng, channels, gconv_groups, ca_ratio, serb_count, dtype)
        self.dfb = DFB(rng, channels, branches, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.dfb.forward(self.atb.forward(x), self.sesab.forward(x))


class FRB(Block):
    """Feature reuse: single-input cascade over the summed stage features;
    zero-initialized parameters give out = s exactly."""

    def __init__(self, rng, channels: int, branches: int, dtype):
        self.entry = make_conv(rng, channels, channels, 1, dtype)
        self.cascade = _ProgressiveCascade(rng, channels, branches, dtype)

    def forward(self, s: Tensor) -> Tensor:
        z = L.conv2d(s, self.entry)
        return T.add(self.cascade.forward(z), s)
