"""Neural building blocks: convolutions, linear, layer norm, activations,
softmax, pooling, pixel shuffle, padding, bilinear resize.

All layers are pure functions of immutable inputs plus parameter containers.
Image tensors use the N x C x H x W layout throughout.
"""

from __future__ import annotations

from typing import Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeMismatch, _result

softmax = T.softmax
relu = T.relu
sigmoid = T.sigmoid
elu = T.elu
gelu = T.gelu

_ACTIVATIONS = {"ELU": elu, "GELU": gelu, "ReLU": relu, "Sigmoid": sigmoid}


def activation(kind: str, x: Tensor) -> Tensor:
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return _ACTIVATIONS[kind](x)


class Block:
    """Base for parameter containers; walks attributes to enumerate params.

    Attribute insertion order fixes the parameter order, which in turn
    fixes checkpoint entry order.  Sub-blocks and lists of sub-blocks are
    recursed with dotted / indexed prefixes.
    """

    def named_params(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Block):
                yield from val.named_params(name)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Block):
                        yield from item.named_params(f"{name}.{i}")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def params(self) -> Iterator[Tensor]:
        for _, p in self.named_params():
            yield p

    def cast_(self, dtype) -> "Block":
        """Cast all parameters in place (training <-> gradient-check precision)."""
        for _, p in self.named_params():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grads(self) -> None:
        for _, p in self.named_params():
            p.grad = None


# -- parameter containers ----------------------------------------------


class ConvParams(Block):
    """Weight (C_out x C_in/groups x kH x kW), optional bias, stride/padding/groups."""

    def __init__(self, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                 padding: int = 0, pad_mode: str = "zero", groups: int = 1):
        c_out, c_in_g, kh, kw = weight.shape
        if stride < 1:
            raise ValueError("stride must be positive")
        if padding < 0:
            raise ValueError("padding must be nonnegative")
        if pad_mode not in ("zero", "reflect"):
            raise ValueError(f"pad_mode must be 'zero' or 'reflect', got {pad_mode!r}")
        if groups < 1 or c_out % groups != 0:
            raise ValueError(f"output channels {c_out} not divisible by groups {groups}")
        if padding > 0 and (kh % 2 == 0 or kw % 2 == 0):
            raise ValueError("same-size convolutions require odd kernel sizes")
        if bias is not None and bias.shape != (c_out,):
            raise ShapeMismatch(f"bias shape {bias.shape} does not match {c_out} output channels")
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self.pad_mode = pad_mode
        self.groups = groups

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


class LayerNormParams(Block):
    def __init__(self, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError("eps must be positive")
        if gamma.shape != beta.shape or gamma.ndim != 1:
            raise ShapeMismatch(f"gamma {gamma.shape} / beta {beta.shape} must be equal 1-d shapes")
        self.gamma = gamma
        self.beta = beta
        self.eps = eps


class LinearParams(Block):
    def __init__(self, weight: Tensor, bias: Optional[Tensor] = None):
        if weight.ndim != 2:
            raise ShapeMismatch(f"linear weight must be 2-d, got {weight.shape}")
        if bias is not None and bias.shape != (weight.shape[0],):
            raise ShapeMismatch(f"bias shape {bias.shape} does not match weight {weight.shape}")
        self.weight = weight
        self.bias = bias


# -- padding -------------------------------------------------------------


def _mirror_index(n: int, before: int, after: int) -> np.ndarray:
    """Reflect indices without repeating the edge sample (numpy 'reflect')."""
    idx = np.arange(-before, n + after)
    period = max(2 * n - 2, 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def pad2d(x: Tensor, pads: Tuple[int, int, int, int], mode: str = "zero") -> Tensor:
    """Pad the two trailing (spatial) axes; pads = (top, bottom, left, right)."""
    top, bottom, left, right = pads
    if min(pads) < 0:
        raise ValueError("pads must be nonnegative")
    if top == bottom == left == right == 0:
        return x
    n, c, h, w = x.shape
    if mode == "zero":
        out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))

        def bw(g):
            return (g[:, :, top:top + h, left:left + w],)

        return _result(out, (x,), bw)
    if mode != "reflect":
        raise ValueError(f"pad mode must be 'zero' or 'reflect', got {mode!r}")
    if top >= h or bottom >= h or left >= w or right >= w:
        raise ValueError(f"reflect padding {pads} too large for spatial size {(h, w)}")
    rows = _mirror_index(h, top, bottom)
    cols = _mirror_index(w, left, right)
    out = x.data[:, :, rows, :][:, :, :, cols]

    def bw(g):
        gh = np.zeros((n, c, h, w + left + right), dtype=g.dtype)
        np.add.at(gh.transpose(2, 0, 1, 3), rows, g.transpose(2, 0, 1, 3))
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx.transpose(3, 0, 1, 2), cols, gh.transpose(3, 0, 1, 2))
        return (gx,)

    return _result(out, (x,), bw)


# -- convolution -----------------------------------------------------------


def _conv2d_raw(x: Tensor, weight: Tensor, stride: int, groups: int) -> Tensor:
    """Valid (unpadded) grouped cross-correlation."""
    n, c_in, h, w = x.shape
    c_out, c_in_g, kh, kw = weight.shape
    if c_in != c_in_g * groups:
        raise ShapeMismatch(
            f"conv2d: input channels {c_in} do not match weight {weight.shape} with groups {groups}"
        )
    if h < kh or w < kw:
        raise ShapeMismatch(f"conv2d: spatial size {(h, w)} underflows kernel {(kh, kw)}")
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    patches = np.empty((n, c_in, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patches[:, :, i, j] = x.data[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    pg = patches.reshape(n, groups, c_in // groups, kh, kw, oh, ow)
    wg = weight.data.reshape(groups, c_out // groups, c_in // groups, kh, kw)
    out = np.einsum("ngcijhw,gocij->ngohw", pg, wg, optimize=True)
    out = np.ascontiguousarray(out.reshape(n, c_out, oh, ow))

    def bw(g):
        gg = g.reshape(n, groups, c_out // groups, oh, ow)
        dw = np.einsum("ngcijhw,ngohw->gocij", pg, gg, optimize=True)
        dpatches = np.einsum("gocij,ngohw->ngcijhw", wg, gg, optimize=True)
        dpatches = dpatches.reshape(n, c_in, kh, kw, oh, ow)
        dx = np.zeros((n, c_in, h, w), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dpatches[:, :, i, j]
        return dx, dw.reshape(weight.shape)

    return _result(out, (x, weight), bw)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Grouped 2-d cross-correlation with zero or reflect padding.

    groups=1 is a standard convolution, groups=C_in (with C_out=C_in) is
    depthwise, anything in between is a grouped convolution.
    """
    if x.ndim != 4:
        raise ShapeMismatch(f"conv2d expects N x C x H x W input, got {x.shape}")
    if x.shape[1] != p.in_channels:
        raise ShapeMismatch(
            f"conv2d: input has {x.shape[1]} channels, params expect {p.in_channels} "
            f"(groups={p.groups})"
        )
    if p.padding > 0:
        x = pad2d(x, (p.padding,) * 4, mode=p.pad_mode)
    out = _conv2d_raw(x, p.weight, p.stride, p.groups)
    if p.bias is not None:
        out = T.add(out, T.reshape(p.bias, (1, p.out_channels, 1, 1)))
    return out


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x @ W^T + b over the trailing dimension; leading dims are free."""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ShapeMismatch(f"linear: trailing dim {x.shape[-1]} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    flat = T.reshape(x, (-1, d_in)) if x.ndim != 2 else x
    out = T.matmul(flat, T.transpose(weight, (1, 0)))
    if bias is not None:
        out = T.add(out, T.reshape(bias, (1, d_out)))
    if x.ndim != 2:
        out = T.reshape(out, lead + (d_out,))
    return out


def layer_norm(x: Tensor, p: LayerNormParams, channel_axis: int = 1) -> Tensor:
    """Normalize over the channel axis only (biased variance), then affine."""
    c = p.gamma.shape[0]
    axis = channel_axis % x.ndim
    if x.shape[axis] != c:
        raise ShapeMismatch(
            f"layer_norm: axis {axis} has length {x.shape[axis]}, params expect {c}"
        )
    mu = T.tmean(x, axis=axis, keepdims=True)
    centered = T.sub(x, mu)
    var = T.tmean(T.mul(centered, centered), axis=axis, keepdims=True)
    xhat = T.div(centered, T.sqrt(T.add(var, p.eps)))
    pshape = tuple(c if i == axis else 1 for i in range(x.ndim))
    return T.add(T.mul(xhat, T.reshape(p.gamma, pshape)), T.reshape(p.beta, pshape))


# -- rearrangement and pooling ---------------------------------------------


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(N, r^2*C, H, W) -> (N, C, rH, rW); out[n,c,rh+i,rw+j] = x[n, c*r^2+i*r+j, h, w]."""
    n, cr2, h, w = x.shape
    if cr2 % (r * r) != 0:
        raise ShapeMismatch(f"pixel_shuffle: {cr2} channels not divisible by r^2 = {r * r}")
    c = cr2 // (r * r)
    x = T.reshape(x, (n, c, r, r, h, w))
    x = T.transpose(x, (0, 1, 4, 2, 5, 3))
    return T.reshape(x, (n, c, h * r, w * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of pixel_shuffle."""
    n, c, hr, wr = x.shape
    if hr % r != 0 or wr % r != 0:
        raise ShapeMismatch(f"pixel_unshuffle: spatial size {(hr, wr)} not divisible by r = {r}")
    h, w = hr // r, wr // r
    x = T.reshape(x, (n, c, h, r, w, r))
    x = T.transpose(x, (0, 1, 3, 5, 2, 4))
    return T.reshape(x, (n, c * r * r, h, w))


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: (N, C, H, W) -> (N, C, 1, 1)."""
    return T.tmean(x, axis=(2, 3), keepdims=True)


def max_pool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Valid max pooling; gradient routes to the argmax of each window."""
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ShapeMismatch(f"max_pool2d: spatial size {(h, w)} underflows window {kernel}")
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    windows = np.empty((n, c, oh, ow, kernel * kernel), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            windows[..., i * kernel + j] = x.data[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    amax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, amax[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        ni, ci, yi, xi = np.indices((n, c, oh, ow))
        hy = yi * stride + amax // kernel
        wx = xi * stride + amax % kernel
        np.add.at(gx, (ni, ci, hy, wx), g)
        return (gx,)

    return _result(out, (x,), bw)


def _bilinear_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic interpolation matrix, align_corners=false convention."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        s = (o + 0.5) * scale - 0.5
        i0 = int(np.floor(s))
        t = s - i0
        a = min(max(i0, 0), n_in - 1)
        b = min(max(i0 + 1, 0), n_in - 1)
        m[o, a] += 1.0 - t
        m[o, b] += t
    return m.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of (N, C, H, W) to (N, C, out_h, out_w)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {(out_h, out_w)}")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x
    a = _bilinear_matrix(h, out_h, x.dtype)
    b = _bilinear_matrix(w, out_w, x.dtype)
    out = np.einsum("nchw,oh,pw->ncop", x.data, a, b, optimize=True)

    def bw(g):
        return (np.einsum("ncop,oh,pw->nchw", g, a, b, optimize=True),)

    return _result(np.ascontiguousarray(out), (x,), bw)
