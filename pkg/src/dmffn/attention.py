"""Transformer branch: square / axial window partitioning, windowed
multi-head self-attention with learned relative position bias, and the
axial-window (AWB), square-window (SWB) and axis transformer (ATB) blocks.

Square windows follow the usual w x w tiling.  Axial windows are stripes
of thickness s spanning a full row or column, so one window crosses many
square windows; the axial blocks split their heads between row and column
stripes instead of shifting windows between layers.  Features whose sizes
do not divide the window are reflect-padded before partitioning and
cropped after the inverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import layers as L
from . import tensor as T
from .init import make_conv, make_layer_norm, make_linear, zeros_param
from .layers import Block, ConvParams, LayerNormParams, LinearParams
from .tensor import ShapeMismatch, Tensor

WINDOW_KINDS = ("square", "axial_row", "axial_col")


@dataclass(frozen=True)
class WindowSpec:
    """kind: square | axial_row | axial_col; size: window side or stripe thickness."""

    kind: str
    size: int

    def __post_init__(self):
        if self.kind not in WINDOW_KINDS:
            raise ValueError(f"window kind must be one of {WINDOW_KINDS}, got {self.kind!r}")
        if self.size < 1:
            raise ValueError(f"window size must be >= 1, got {self.size}")


def _require_divisible(axis: str, length: int, size: int) -> None:
    if length % size != 0:
        raise ShapeMismatch(f"window partition: axis {axis} (length {length}) not divisible by {size}")


def window_partition(x: Tensor, spec: WindowSpec) -> Tensor:
    """(N, C, H, W) -> (M, L, C) windows of L tokens each."""
    n, c, h, w = x.shape
    s = spec.size
    if spec.kind == "square":
        _require_divisible("H", h, s)
        _require_divisible("W", w, s)
        x = T.reshape(x, (n, c, h // s, s, w // s, s))
        x = T.transpose(x, (0, 2, 4, 3, 5, 1))
        return T.reshape(x, (n * (h // s) * (w // s), s * s, c))
    if spec.kind == "axial_row":
        _require_divisible("H", h, s)
        x = T.reshape(x, (n, c, h // s, s, w))
        x = T.transpose(x, (0, 2, 3, 4, 1))
        return T.reshape(x, (n * (h // s), s * w, c))
    _require_divisible("W", w, s)
    x = T.reshape(x, (n, c, h, w // s, s))
    x = T.transpose(x, (0, 3, 2, 4, 1))
    return T.reshape(x, (n * (w // s), h * s, c))


def window_reverse(windows: Tensor, spec: WindowSpec, n: int, c: int, h: int, w: int) -> Tensor:
    """Exact inverse of window_partition for the same geometry."""
    s = spec.size
    if spec.kind == "square":
        x = T.reshape(windows, (n, h // s, w // s, s, s, c))
        x = T.transpose(x, (0, 5, 1, 3, 2, 4))
        return T.reshape(x, (n, c, h, w))
    if spec.kind == "axial_row":
        x = T.reshape(windows, (n, h // s, s, w, c))
        x = T.transpose(x, (0, 4, 1, 2, 3))
        return T.reshape(x, (n, c, h, w))
    x = T.reshape(windows, (n, w // s, h, s, c))
    x = T.transpose(x, (0, 4, 2, 1, 3))
    return T.reshape(x, (n, c, h, w))


# -- relative position bias ----------------------------------------------


def bias_table_rows(spec: WindowSpec, span: int) -> int:
    """Number of distinct (clamped) relative offsets a bias table must cover."""
    s = spec.size
    if spec.kind == "square":
        return (2 * s - 1) ** 2
    return (2 * s - 1) * (2 * span - 1)


_BIAS_IDX_CACHE: dict = {}


def bias_index_map(spec: WindowSpec, h: int, w: int, span: int) -> np.ndarray:
    """(L, L) int map from token pairs to bias-table rows.

    Offsets along a stripe's long axis are clamped to +-(span - 1); all
    offsets inside square windows are exact.
    """
    s = spec.size
    if spec.kind == "square":
        key = ("square", s)
    elif spec.kind == "axial_row":
        key = ("axial_row", s, w, span)
    else:
        key = ("axial_col", s, h, span)
    cached = _BIAS_IDX_CACHE.get(key)
    if cached is not None:
        return cached
    if spec.kind == "square":
        ys = np.repeat(np.arange(s), s)
        xs = np.tile(np.arange(s), s)
        dy = ys[:, None] - ys[None, :] + (s - 1)
        dx = xs[:, None] - xs[None, :] + (s - 1)
        idx = dy * (2 * s - 1) + dx
    elif spec.kind == "axial_row":
        ys = np.repeat(np.arange(s), w)
        xs = np.tile(np.arange(w), s)
        dy = ys[:, None] - ys[None, :] + (s - 1)
        dx = np.clip(xs[:, None] - xs[None, :], -(span - 1), span - 1) + (span - 1)
        idx = dy * (2 * span - 1) + dx
    else:
        ys = np.repeat(np.arange(h), s)
        xs = np.tile(np.arange(s), h)
        dy = np.clip(ys[:, None] - ys[None, :], -(span - 1), span - 1) + (span - 1)
        dx = xs[:, None] - xs[None, :] + (s - 1)
        idx = dy * (2 * s - 1) + dx
    _BIAS_IDX_CACHE[key] = idx
    return idx


# -- multi-head self-attention ---------------------------------------------


class AttentionParams(Block):
    """Joint QKV projection, output projection, head count, optional bias table."""

    def __init__(self, qkv: LinearParams, proj: LinearParams, heads: int,
                 rel_bias_table: Optional[Tensor] = None):
        c = proj.weight.shape[0]
        if c % heads != 0:
            raise ValueError(f"channels {c} not divisible by heads {heads}")
        if qkv.weight.shape != (3 * c, c):
            raise ShapeMismatch(f"qkv weight must be {(3 * c, c)}, got {qkv.weight.shape}")
        self.qkv = qkv
        self.proj = proj
        self.heads = heads
        self.rel_bias_table = rel_bias_table

    @property
    def channels(self) -> int:
        return self.proj.weight.shape[0]


def attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int,
                   bias: Optional[Tensor] = None) -> Tensor:
    """Scaled dot-product attention over (M, L, C) windows, heads folded in C."""
    m, l, c = q.shape
    dh = c // heads
    scale = 1.0 / float(np.sqrt(dh))

    def to_heads(t):
        return T.transpose(T.reshape(t, (m, l, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = to_heads(q), to_heads(k), to_heads(v)
    logits = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), scale)
    if bias is not None:
        logits = T.add(logits, T.reshape(bias, (1, heads, l, l)))
    attn = T.softmax(logits, axis=-1)
    out = T.matmul(attn, vh)
    return T.reshape(T.transpose(out, (0, 2, 1, 3)), (m, l, c))


def mhsa(windows: Tensor, p: AttentionParams, bias_idx: Optional[np.ndarray] = None) -> Tensor:
    """Windowed MHSA: QKV projection, per-head attention, output projection."""
    m, l, c = windows.shape
    if c != p.channels:
        raise ShapeMismatch(f"mhsa: window channels {c} do not match params {p.channels}")
    qkv = L.linear(windows, p.qkv.weight, p.qkv.bias)
    q = T.narrow(qkv, 2, 0, c)
    k = T.narrow(qkv, 2, c, c)
    v = T.narrow(qkv, 2, 2 * c, c)
    bias = None
    if bias_idx is not None:
        if p.rel_bias_table is None:
            raise ValueError("bias_idx given but params carry no relative-bias table")
        gathered = T.gather_rows(p.rel_bias_table, bias_idx.reshape(-1))
        bias = T.transpose(T.reshape(gathered, (l, l, p.heads)), (2, 0, 1))
    out = attention_core(q, k, v, p.heads, bias)
    return L.linear(out, p.proj.weight, p.proj.bias)


# -- token/feature-map plumbing ---------------------------------------------


def _map_to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (n * h * w, c))


def _tokens_to_map(tokens: Tensor, n: int, h: int, w: int) -> Tensor:
    c = tokens.shape[-1]
    return T.transpose(T.reshape(tokens, (n, h, w, c)), (0, 3, 1, 2))


def _pad_to_multiple(x: Tensor, mult_h: int, mult_w: int) -> Tuple[Tensor, int, int]:
    n, c, h, w = x.shape
    ph = (-h) % mult_h
    pw = (-w) % mult_w
    if ph or pw:
        x = L.pad2d(x, (0, ph, 0, pw), mode="reflect")
    return x, ph, pw


def _crop(x: Tensor, h: int, w: int) -> Tensor:
    if x.shape[2] != h:
        x = T.narrow(x, 2, 0, h)
    if x.shape[3] != w:
        x = T.narrow(x, 3, 0, w)
    return x


class Mlp(Block):
    """Per-position two-layer MLP with GELU, applied over the channel axis."""

    def __init__(self, rng, channels: int, ratio: int, dtype):
        self.fc1 = make_linear(rng, channels, channels * ratio, dtype)
        self.fc2 = make_linear(rng, channels * ratio, channels, dtype)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        t = _map_to_tokens(x)
        t = L.linear(t, self.fc1.weight, self.fc1.bias)
        t = T.gelu(t)
        t = L.linear(t, self.fc2.weight, self.fc2.bias)
        return _tokens_to_map(t, n, h, w)


class ResidualConv(Block):
    """Conv3x3 -> ELU -> Conv3x3 side branch used inside the axial block."""

    def __init__(self, rng, channels: int, dtype):
        self.conv1 = make_conv(rng, channels, channels, 3, dtype, padding=1)
        self.conv2 = make_conv(rng, channels, channels, 3, dtype, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return L.conv2d(T.elu(L.conv2d(x, self.conv1)), self.conv2)


# -- attention blocks --------------------------------------------------------


class AWB(Block):
    """Axial-window attention block.

    f1 = x + RB(LN(x)) + MHSA_axial(LN(x)); out = f1 + MLP(LN(f1)).
    Row stripes take the first half of the heads, column stripes the second
    half; the two halves are concatenated on the channel axis before the
    output projection.
    """

    def __init__(self, rng, channels: int, heads: int, stripe: int, dtype,
                 mlp_ratio: int = 2, bias_span: int = 32):
        if heads % 2 != 0:
            raise ValueError(f"axial attention splits heads in half; heads={heads} must be even")
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.ln1 = make_layer_norm(channels, dtype)
        self.rb = ResidualConv(rng, channels, dtype)
        self.attn = AttentionParams(
            make_linear(rng, channels, 3 * channels, dtype),
            make_linear(rng, channels, channels, dtype),
            heads,
        )
        row_spec = WindowSpec("axial_row", stripe)
        col_spec = WindowSpec("axial_col", stripe)
        self.row_bias = zeros_param((bias_table_rows(row_spec, bias_span), heads // 2), dtype)
        self.col_bias = zeros_param((bias_table_rows(col_spec, bias_span), heads // 2), dtype)
        self.ln2 = make_layer_norm(channels, dtype)
        self.mlp = Mlp(rng, channels, mlp_ratio, dtype)
        self.stripe = stripe
        self.bias_span = bias_span
        self.row_spec = row_spec
        self.col_spec = col_spec

    def _axial_attention(self, t: Tensor) -> Tensor:
        n, c, h, w = t.shape
        heads = self.attn.heads
        half = c // 2
        tokens = _map_to_tokens(t)
        qkv = L.linear(tokens, self.attn.qkv.weight, self.attn.qkv.bias)
        maps = _tokens_to_map(qkv, n, h, w)
        outs = []
        for offset, spec, table in (
            (0, self.row_spec, self.row_bias),
            (half, self.col_spec, self.col_bias),
        ):
            q = T.narrow(maps, 1, offset, half)
            k = T.narrow(maps, 1, c + offset, half)
            v = T.narrow(maps, 1, 2 * c + offset, half)
            if spec.kind == "axial_row":
                q, ph, pw = _pad_to_multiple(q, spec.size, 1)
                k, _, _ = _pad_to_multiple(k, spec.size, 1)
                v, _, _ = _pad_to_multiple(v, spec.size, 1)
            else:
                q, ph, pw = _pad_to_multiple(q, 1, spec.size)
                k, _, _ = _pad_to_multiple(k, 1, spec.size)
                v, _, _ = _pad_to_multiple(v, 1, spec.size)
            hp, wp = h + ph, w + pw
            qw = window_partition(q, spec)
            kw = window_partition(k, spec)
            vw = window_partition(v, spec)
            idx = bias_index_map(spec, hp, wp, self.bias_span)
            m, l, _ = qw.shape
            gathered = T.gather_rows(table, idx.reshape(-1))
            bias = T.transpose(T.reshape(gathered, (l, l, heads // 2)), (2, 0, 1))
            ow = attention_core(qw, kw, vw, heads // 2, bias)
            o = window_reverse(ow, spec, n, half, hp, wp)
            outs.append(_crop(o, h, w))
        merged = T.concat(outs, axis=1)
        tokens = _map_to_tokens(merged)
        tokens = L.linear(tokens, self.attn.proj.weight, self.attn.proj.bias)
        return _tokens_to_map(tokens, n, h, w)

    def forward(self, x: Tensor) -> Tensor:
        t = L.layer_norm(x, self.ln1, channel_axis=1)
        f1 = T.add(T.add(x, self.rb.forward(t)), self._axial_attention(t))
        return T.add(f1, self.mlp.forward(L.layer_norm(f1, self.ln2, channel_axis=1)))


class SWB(Block):
    """Square-window attention block (no window shifting).

    f1 = x + MHSA_square(LN(x)); out = f1 + MLP(LN(f1)).
    """

    def __init__(self, rng, channels: int, heads: int, window: int, dtype,
                 mlp_ratio: int = 2):
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        spec = WindowSpec("square", window)
        self.ln1 = make_layer_norm(channels, dtype)
        self.attn = AttentionParams(
            make_linear(rng, channels, 3 * channels, dtype),
            make_linear(rng, channels, channels, dtype),
            heads,
            zeros_param((bias_table_rows(spec, 0), heads), dtype),
        )
        self.ln2 = make_layer_norm(channels, dtype)
        self.mlp = Mlp(rng, channels, mlp_ratio, dtype)
        self.window = window
        self.spec = spec

    def _square_attention(self, t: Tensor) -> Tensor:
        n, c, h, w = t.shape
        t, ph, pw = _pad_to_multiple(t, self.window, self.window)
        hp, wp = h + ph, w + pw
        windows = window_partition(t, self.spec)
        idx = bias_index_map(self.spec, hp, wp, 0)
        out = mhsa(windows, self.attn, idx)
        return _crop(window_reverse(out, self.spec, n, c, hp, wp), h, w)

    def forward(self, x: Tensor) -> Tensor:
        f1 = T.add(x, self._square_attention(L.layer_norm(x, self.ln1, channel_axis=1)))
        return T.add(f1, self.mlp.forward(L.layer_norm(f1, self.ln2, channel_axis=1)))


class ATB(Block):
    """Axis transformer block: alternating AWB/SWB pairs, then a 3x3
    convolution, wrapped in an outer residual."""

    def __init__(self, rng, channels: int, heads: int, window: int, stripe: int,
                 dtype, depth: int = 1, mlp_ratio: int = 2, bias_span: int = 32):
        blocks = []
        for _ in range(depth):
            blocks.append(AWB(rng, channels, heads, stripe, dtype, mlp_ratio, bias_span))
            blocks.append(SWB(rng, channels, heads, window, dtype, mlp_ratio))
        self.blocks = blocks
        self.conv = make_conv(rng, channels, channels, 3, dtype, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        y = x
        for blk in self.blocks:
            y = blk.forward(y)
        return T.add(x, L.conv2d(y, self.conv))
