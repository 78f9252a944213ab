"""Deterministic parameter initializers.

Attention and linear weights draw from a truncated normal (std 0.02,
clipped at two standard deviations by resampling); convolution weights use
He-uniform over fan-in; biases, norm offsets and relative-bias tables start
at zero; norm scales start at one.  All draws come from a caller-provided
numpy Generator, so a fixed seed yields bitwise-identical parameters.
"""

from __future__ import annotations

import numpy as np

from .layers import ConvParams, LayerNormParams, LinearParams
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def make_conv(rng, c_in: int, c_out: int, kernel: int, dtype, *, stride: int = 1,
              padding: int = 0, pad_mode: str = "zero", groups: int = 1,
              bias: bool = True) -> ConvParams:
    if c_in % groups != 0:
        raise ValueError(f"input channels {c_in} not divisible by groups {groups}")
    shape = (c_out, c_in // groups, kernel, kernel)
    fan_in = (c_in // groups) * kernel * kernel
    w = _param(he_uniform(rng, shape, fan_in), dtype)
    b = _param(np.zeros(c_out), dtype) if bias else None
    return ConvParams(w, b, stride=stride, padding=padding, pad_mode=pad_mode, groups=groups)


def make_linear(rng, d_in: int, d_out: int, dtype, *, bias: bool = True) -> LinearParams:
    w = _param(trunc_normal(rng, (d_out, d_in)), dtype)
    b = _param(np.zeros(d_out), dtype) if bias else None
    return LinearParams(w, b)


def make_layer_norm(channels: int, dtype, eps: float = 1e-5) -> LayerNormParams:
    return LayerNormParams(_param(np.ones(channels), dtype), _param(np.zeros(channels), dtype), eps)


def zeros_param(shape, dtype) -> Tensor:
    return _param(np.zeros(shape), dtype)
