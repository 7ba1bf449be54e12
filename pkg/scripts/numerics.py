#!/usr/bin/env python3
"""
Dense tensors with reverse-mode differentiation over a fixed operation set.

The operation set is exactly what the tiny transformer and the routers
need: matmul, trailing-axis bias add, elementwise mul/pow/log, exact GELU,
masked softmax, fused layer norm, row gathers, slicing and concatenation,
segment means and a fused token cross-entropy.

Usage:
    from numerics import Tensor, matmul, gelu, precision

    with precision(np.float64):
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        loss = mean(gelu(matmul(x, w)))
        loss.backward()
        w.grad  # d loss / d w

Graphs are recorded per thread; `no_grad()` turns recording off for the
calling thread only, so inference can run on worker threads while a
training loop records on another.
"""

import math
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from errors import DimensionError, InputError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_default_dtype = np.float32
_grad_mode = threading.local()


# ============================================================================
# PRECISION AND GRAD MODE
# ============================================================================

def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    """Select float32 (default) or float64 (test mode) for new tensors."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise InputError(f"unsupported dtype: {dtype}")
    _default_dtype = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def grad_enabled() -> bool:
    return getattr(_grad_mode, 'enabled', True)


@contextmanager
def no_grad():
    """Run operations without recording a graph on this thread."""
    previous = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


# ============================================================================
# TENSOR
# ============================================================================

class Tensor:
    """A numpy array plus the bookkeeping for reverse-mode gradients."""

    __slots__ = ('data', 'grad', 'requires_grad', '_parents', '_backward', 'op')
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = 'leaf'

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def gradient(self) -> np.ndarray:
        """Accumulated gradient, zeros when no loss has reached this tensor."""
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def backward(self):
        Graph(self).backward()

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("division is only defined by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


class Graph:
    """Recorded operations reachable from a scalar output, in topological order."""

    def __init__(self, root: Tensor):
        if not root.requires_grad:
            raise InputError("backward() needs an output that depends on a tensor with requires_grad")
        if root.data.size != 1:
            raise DimensionError(f"backward() needs a scalar output, got shape {root.shape}")
        self.root = root
        self.nodes = self._topological_order(root)

    @staticmethod
    def _topological_order(root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, finished = stack.pop()
            if finished:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self):
        # leaves accumulate across calls, intermediates restart
        for node in self.nodes:
            if node._parents:
                node.grad = None
        self.root.grad = np.ones_like(self.root.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in self.nodes:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ============================================================================
# ARITHMETIC
# ============================================================================

def _leading_sum(g, shape):
    """Reduce a broadcast gradient back to a trailing-axis operand shape."""
    if g.shape == tuple(shape):
        return g
    if len(shape) == 0:
        return g.sum()
    return g.reshape(-1, *shape).sum(axis=0)


def _pair_shapes(a, b, op):
    if a.shape == b.shape or b.ndim == 0 or a.shape[-len(b.shape):] == b.shape and b.ndim == 1:
        return
    raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    """a + b where b is a same-shape tensor, a trailing-axis bias, or a scalar."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)

        def _backward_scalar(g):
            a._accumulate(g)

        return Tensor._from_op(a.data + a.data.dtype.type(c), (a,), _backward_scalar, 'add')
    if b.ndim > a.ndim:
        a, b = b, a
    _pair_shapes(a, b, 'add')

    def _backward(g):
        a._accumulate(g)
        b._accumulate(_leading_sum(g, b.shape))

    return Tensor._from_op(a.data + b.data, (a, b), _backward, 'add')


def neg(a: Tensor) -> Tensor:
    def _backward(g):
        a._accumulate(-g)

    return Tensor._from_op(-a.data, (a,), _backward, 'neg')


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -float(b))


def mul(a, b) -> Tensor:
    """Elementwise product with the same shape rules as add."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = a.data.dtype.type(float(b))

        def _backward_scalar(g):
            a._accumulate(g * c)

        return Tensor._from_op(a.data * c, (a,), _backward_scalar, 'mul')
    if b.ndim > a.ndim:
        a, b = b, a
    _pair_shapes(a, b, 'mul')

    def _backward(g):
        a._accumulate(g * b.data)
        b._accumulate(_leading_sum(g * a.data, b.shape))

    return Tensor._from_op(a.data * b.data, (a, b), _backward, 'mul')


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def _backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return Tensor._from_op(a.data @ b.data, (a, b), _backward, 'matmul')


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")

    def _backward(g):
        a._accumulate(g.T)

    return Tensor._from_op(a.data.T.copy(), (a,), _backward, 'transpose')


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise a**exponent for non-negative a."""
    exponent = float(exponent)

    def _backward(g):
        if exponent == 0.0:
            return
        a._accumulate(g * exponent * np.power(a.data, exponent - 1.0))

    return Tensor._from_op(np.power(a.data, exponent), (a,), _backward, 'power')


def log(a: Tensor, floor: Optional[float] = None) -> Tensor:
    """Natural log; values below `floor` are clamped and pass no gradient."""
    if floor is None:
        clamped = a.data
        live = None
    else:
        clamped = np.maximum(a.data, a.data.dtype.type(floor))
        live = a.data > floor

    def _backward(g):
        grad = g / clamped
        if live is not None:
            grad = np.where(live, grad, 0.0)
        a._accumulate(grad)

    return Tensor._from_op(np.log(clamped), (a,), _backward, 'log')


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF."""
    x = a.data
    cdf = ndtr(x).astype(x.dtype, copy=False)

    def _backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        a._accumulate(g * (cdf + x * pdf))

    return Tensor._from_op(x * cdf, (a,), _backward, 'gelu')


# ============================================================================
# REDUCTIONS AND NORMALIZATION
# ============================================================================

def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    def _backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    data = a.data.sum() if axis is None else a.data.sum(axis=axis)
    return Tensor._from_op(np.asarray(data, dtype=a.data.dtype), (a,), _backward, 'reduce_sum')


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    if count == 0:
        raise InputError("mean of an empty tensor")
    return mul(reduce_sum(a, axis), 1.0 / count)


def softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax along `axis`, shifted by the max before exponentiation.

    Args:
        a: Input logits
        axis: Normalization axis
        mask: Optional boolean array, False entries get probability 0
    """
    z = a.data if mask is None else np.where(mask, a.data, -np.inf)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        a._accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return Tensor._from_op(p, (a,), _backward, 'softmax')


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    if gamma.shape != a.shape[-1:] or beta.shape != a.shape[-1:]:
        raise DimensionError(f"layer_norm: scale/shift shape must be {a.shape[-1:]}")
    x = a.data
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def _backward(g):
        gamma._accumulate(_leading_sum(g * xhat, gamma.shape))
        beta._accumulate(_leading_sum(g, beta.shape))
        gx = g * gamma.data
        a._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return Tensor._from_op(xhat * gamma.data + beta.data, (a, gamma, beta), _backward, 'layer_norm')


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean token cross-entropy of (N, V) logits against N integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size == 0:
        raise InputError("cross_entropy needs at least one target")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(targets.size)
    n = targets.size

    def _backward(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        logits._accumulate(grad * (g / n))

    value = np.asarray(-logp[rows, targets].mean(), dtype=logits.data.dtype)
    return Tensor._from_op(value, (logits,), _backward, 'cross_entropy')


# ============================================================================
# INDEXING AND LAYOUT
# ============================================================================

def take_rows(weight: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a (V, d) table, as in an embedding lookup."""
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise DimensionError(f"take_rows needs a 2-D table, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise InputError(f"row index out of range for table of {weight.shape[0]} rows")

    def _backward(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids, g)
        weight._accumulate(grad)

    return Tensor._from_op(weight.data[ids], (weight,), _backward, 'take_rows')


def pick(a: Tensor, index: Sequence[int]) -> Tensor:
    """Select one column per row: out[i] = a[i, index[i]]."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError(f"pick: tensor {a.shape} vs index {index.shape}")
    rows = np.arange(a.shape[0])

    def _backward(g):
        grad = np.zeros_like(a.data)
        grad[rows, index] = g
        a._accumulate(grad)

    return Tensor._from_op(a.data[rows, index], (a,), _backward, 'pick')


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Column slice a[:, start:stop] of a 2-D tensor."""
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"columns[{start}:{stop}] out of range for {a.shape}")

    def _backward(g):
        grad = np.zeros_like(a.data)
        grad[:, start:stop] = g
        a._accumulate(grad)

    return Tensor._from_op(a.data[:, start:stop].copy(), (a,), _backward, 'columns')


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise InputError("concat of no tensors")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def _backward(g):
        for t, part in zip(tensors, np.split(g, bounds, axis=axis)):
            t._accumulate(part)

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    return Tensor._from_op(data, tensors, _backward, 'concat')


def segment_mean(a: Tensor, sizes: Sequence[int]) -> Tensor:
    """Average consecutive row groups of a 2-D tensor; group k has sizes[k] rows."""
    sizes = [int(s) for s in sizes]
    if a.ndim != 2 or any(s <= 0 for s in sizes) or np.sum(sizes) != a.shape[0]:
        raise DimensionError(f"segment_mean: sizes {sizes} do not partition {a.shape[0]} rows")
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    counts = np.asarray(sizes, dtype=a.data.dtype)
    data = np.add.reduceat(a.data, starts, axis=0) / counts[:, None]

    def _backward(g):
        a._accumulate(np.repeat(g / counts[:, None], sizes, axis=0))

    return Tensor._from_op(data, (a,), _backward, 'segment_mean')


# ============================================================================
# INITIALIZATION AND CHECKING
# ============================================================================

def xavier_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform matrix of shape (fan_in, fan_out)."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, floor: float = 1e-3) -> float:
    """
    Compare reverse-mode gradients with central finite differences.

    Args:
        f: Scalar function of one tensor
        x: Point of evaluation (not modified)
        h: Finite-difference step, meant for 64-bit data
        floor: Lower bound of the |analytic| + |numeric| denominator

    Returns:
        Largest per-coordinate relative error
    """
    probe = Tensor(x.data, requires_grad=True, dtype=x.data.dtype)
    f(probe).backward()
    analytic = probe.gradient().copy()

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = float(f(probe).data)
            flat[i] = original - h
            minus = float(f(probe).data)
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * h)

    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
