"""Convolutional branch: channel attention (CA), enhanced spatial attention
(ESA), the two-stage space-enhanced residual block (SERB) and the SESAB
stack that forms the coarse-grained feature path of each network stage.
"""

from __future__ import annotations

from typing import List

import numpy as np

from . import layers as L
from . import tensor as T
from .init import make_conv
from .layers import Block
from .tensor import ShapeMismatch, Tensor


def default_ca_ratio(channels: int) -> int:
    """Squeeze ratio: 16 for wide layers, 4 for narrow, 1 when nothing divides."""
    if channels >= 32 and channels % 16 == 0:
        return 16
    if channels >= 4 and channels % 4 == 0:
        return 4
    return 1


class ChannelAttention(Block):
    """Per-channel gate from globally pooled statistics.

    w = Sigmoid(expand(ReLU(reduce(global_avg_pool(x))))); out = x * w.
    """

    def __init__(self, rng, channels: int, ratio: int, dtype):
        if ratio < 1 or channels % ratio != 0:
            raise ValueError(f"channels {channels} not divisible by ca ratio {ratio}")
        mid = channels // ratio
        self.reduce = make_conv(rng, channels, mid, 1, dtype)
        self.expand = make_conv(rng, mid, channels, 1, dtype)
        self.ratio = ratio

    def forward(self, x: Tensor) -> Tensor:
        w = L.global_avg_pool(x)
        w = T.relu(L.conv2d(w, self.reduce))
        w = T.sigmoid(L.conv2d(w, self.expand))
        return T.mul(x, w)


class SpatialAttention(Block):
    """Enhanced spatial attention: a strided downsample / convolve /
    bilinear-upsample path produces a sigmoid mask over positions.

    m = reduce(x); branch = up(body(maxpool(stride_conv(m))));
    out = x * Sigmoid(expand(branch + m)).  Inputs too small for the
    pooling window skip the pool.
    """

    def __init__(self, rng, channels: int, dtype, pool_size: int = 7, pool_stride: int = 3):
        mid = max(channels // 4, 1)
        if mid >= channels:
            raise ValueError(f"spatial attention needs channels >= 2, got {channels}")
        self.reduce = make_conv(rng, channels, mid, 1, dtype)
        self.stride_conv = make_conv(rng, mid, mid, 3, dtype, stride=2)
        self.body_conv = make_conv(rng, mid, mid, 3, dtype, padding=1)
        self.expand = make_conv(rng, mid, channels, 1, dtype)
        self.pool_size = pool_size
        self.pool_stride = pool_stride

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if h < 3 or w < 3:
            raise ShapeMismatch(f"spatial attention needs spatial size >= 3, got {(h, w)}")
        m = L.conv2d(x, self.reduce)
        y = L.conv2d(m, self.stride_conv)
        if y.shape[2] >= self.pool_size and y.shape[3] >= self.pool_size:
            y = L.max_pool2d(y, self.pool_size, self.pool_stride)
        y = L.conv2d(y, self.body_conv)
        y = L.resize_bilinear(y, h, w)
        mask = T.sigmoid(L.conv2d(T.add(y, m), self.expand))
        return T.mul(x, mask)


class _SerbStage(Block):
    """Grouped 1x1 -> depthwise 3x3 -> grouped 1x1 bottleneck plus a 3x3 skip."""

    def __init__(self, rng, channels: int, groups: int, dtype):
        self.gconv_in = make_conv(rng, channels, channels, 1, dtype, groups=groups)
        self.dwconv = make_conv(rng, channels, channels, 3, dtype, padding=1, groups=channels)
        self.gconv_out = make_conv(rng, channels, channels, 1, dtype, groups=groups)
        self.skip_conv = make_conv(rng, channels, channels, 3, dtype, padding=1)

    def bottleneck(self, x: Tensor) -> Tensor:
        return T.elu(L.conv2d(L.conv2d(L.conv2d(x, self.gconv_in), self.dwconv), self.gconv_out))

    def combine(self, x: Tensor) -> Tensor:
        return T.add(T.add(x, L.conv2d(x, self.skip_conv)), self.bottleneck(x))


class SERB(Block):
    """Two-stage space-enhanced residual block.

    Stage 1: f1 = ELU(x + Conv(x) + ELU(GConv(DwConv(GConv(x)))));
    stage 2 feeds the same combination through CA then ESA.
    """

    def __init__(self, rng, channels: int, groups: int, ca_ratio: int, dtype):
        if channels % groups != 0:
            raise ValueError(f"channels {channels} not divisible by conv groups {groups}")
        self.stage1 = _SerbStage(rng, channels, groups, dtype)
        self.stage2 = _SerbStage(rng, channels, groups, dtype)
        self.ca = ChannelAttention(rng, channels, ca_ratio, dtype)
        self.esa = SpatialAttention(rng, channels, dtype)

    def forward(self, x: Tensor) -> Tensor:
        f1 = T.elu(self.stage1.combine(x))
        return self.esa.forward(self.ca.forward(self.stage2.combine(f1)))


class SESAB(Block):
    """Stack of SERBs with an outer residual: out = x + SERB_K(...SERB_1(x)).

    An empty stack degenerates to the identity.
    """

    def __init__(self, rng, channels: int, groups: int, ca_ratio: int, count: int, dtype):
        self.serbs: List[SERB] = [SERB(rng, channels, groups, ca_ratio, dtype) for _ in range(count)]

    def forward(self, x: Tensor) -> Tensor:
        if not self.serbs:
            return x
        y = x
        for serb in self.serbs:
            y = serb.forward(y)
        return T.add(x, y)
