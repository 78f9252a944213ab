"""Dense tensors with reverse-mode automatic differentiation on numpy buffers.

Two precisions are supported: float32 for training and inference, float64
for gradient verification (single-precision central differences are too
noisy to resolve a 1e-4 relative tolerance).  Every differentiable
operation records a backward closure; `backward()` walks the graph in
reverse topological order and accumulates gradients additively.  Nothing
clears gradients implicitly - call `zero_grads` between optimizer steps.

Reductions use numpy's deterministic pairwise summation, so results are
reproducible run to run for a fixed environment.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf as _erf

Scalar = Union[int, float]

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on invalid backpropagation requests (non-scalar loss, untracked graph)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the context (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional float array, optionally tracked by the autodiff graph.

    `data` is a numpy buffer (float32 or float64, row-major).  `grad`, when
    populated by `backward()`, always matches `data` in shape and dtype.
    A tensor created while recording is disabled (or with requires_grad
    False and no tracked parents) never accumulates grad.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # -- conveniences -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(full_like(self, other), self) if np.isscalar(other) else sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def full_like(t: Tensor, value: Scalar) -> Tensor:
    return Tensor(np.full_like(t.data, value))


def _result(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording the graph edge when tracking is active."""
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    if tracked:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if b.ndim == 0 or a.ndim == 0:
        return
    if a.ndim != b.ndim or any(
        da != db and da != 1 and db != 1 for da, db in zip(sa, sb)
    ):
        raise ShapeMismatch(
            f"{op}: shapes {sa} and {sb} are not equal or singleton-broadcastable"
        )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were singleton-expanded in the forward op."""
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return g.sum()
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_binary_shapes("add", a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_binary_shapes("sub", a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_binary_shapes("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _result(out, (a, b), bw)


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_binary_shapes("div", a, b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bw(g):
        ga = g / bd
        gb = -g * ad / (bd * bd)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), bw)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a: Tensor, b) -> Tensor:
    """Dispatch add/sub/mul by name; `b` may be a tensor or a scalar."""
    if op_kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op_kind!r}; expected one of {sorted(_ELEMENTWISE)}")
    return _ELEMENTWISE[op_kind](a, b)


# -- matmul and reductions --------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product (...,M,K) @ (...,K,P) with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(
            f"matmul inner dimensions disagree: {a.shape} vs {b.shape}"
        )
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(
            f"matmul batch dimensions disagree: {a.shape} vs {b.shape}"
        )
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            ax = tuple(a % len(shape) for a in ax)
            kshape = tuple(1 if i in ax else s for i, s in enumerate(shape))
            g = g.reshape(kshape)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a % x.ndim] for a in ax]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- elementwise nonlinearities ---------------------------------------


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _result(out, (x,), bw)


def texp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _result(out, (x,), bw)


def absval(x: Tensor) -> Tensor:
    out = np.abs(x.data)
    sign = np.sign(x.data)

    def bw(g):
        return (g * sign,)

    return _result(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0).astype(x.dtype)

    def bw(g):
        return (g * mask,)

    return _result(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), bw)


def elu(x: Tensor) -> Tensor:
    """ELU with alpha = 1: x for x > 0, exp(x) - 1 otherwise."""
    xd = x.data
    e = np.exp(np.minimum(xd, 0.0))
    out = np.where(xd > 0, xd, e - 1.0).astype(x.dtype)

    def bw(g):
        return (g * np.where(xd > 0, np.ones((), dtype=x.dtype), e),)

    return _result(out, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + _erf(xd / np.sqrt(2.0)))
    out = (xd * cdf).astype(x.dtype)
    pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)

    def bw(g):
        return (g * (cdf + xd * pdf),)

    return _result(out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis`; slices sum to 1."""
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (x,), bw)


# -- shape manipulation ------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    orig = x.shape

    def bw(g):
        return (g.reshape(orig),)

    return _result(out, (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = x.data.transpose(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _result(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return _result(out, tuple(tensors), bw)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along `axis`."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return _result(out.copy(), (x,), bw)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather `table[idx]`; backward scatter-adds into the table."""
    idx = np.asarray(idx)
    out = table.data[idx]
    rows = table.shape

    def bw(g):
        gt = np.zeros(rows, dtype=g.dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(out, (table,), bw)


# -- backward pass ------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    """Iterative postorder: every node appears after all of its parents."""
    order: list = []
    visited: set = set()
    stack: list = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every tracked tensor reachable from a scalar loss.

    Gradients accumulate additively on top of whatever `.grad` already
    holds, including across separate `backward` calls.
    """
    if loss.size != 1:
        raise GraphError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is not part of a tracked graph (was recording disabled?)")
    order = _topo_order(loss)
    seeds: dict = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = seeds.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in seeds:
                seeds[id(p)] = seeds[id(p)] + pg
            else:
                seeds[id(p)] = pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- finite-difference oracle -------------------------------------------


@dataclass
class GradReport:
    """Outcome of one analytic-vs-numeric gradient comparison."""

    op_name: str
    max_rel_error: float
    passed: bool
    tolerance: float

    def __post_init__(self):
        self.passed = bool(self.max_rel_error <= self.tolerance)


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of the scalar map `f` at `x`, per index.

    g[i] = (f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps).  `f` must be
    deterministic; evaluation runs with graph recording disabled.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data.astype(np.float64).copy()
    probe = Tensor(base, requires_grad=False)
    flat = probe.data.reshape(-1)
    g = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(probe).data.reshape(-1)[0])
            flat[i] = orig - eps
            fm = float(f(probe).data.reshape(-1)[0])
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * eps)
    return g.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Scale-normalized max deviation between two gradient arrays.

    Normalizes by the larger infinity norm of the two (floored), so zero
    gradients compare against `floor` rather than dividing by zero.
    """
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)
