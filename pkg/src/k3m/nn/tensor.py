"""Reverse-mode autodiff over dense numpy arrays.

Graphs are recorded dynamically: every op returns a Tensor that remembers its
parents and a closure routing the output gradient back to them.  Ops whose
inputs all have ``requires_grad=False`` return plain constants with no graph
bookkeeping, so pure evaluation stays cheap.

Working precision is float32.  Build parameters as float64 when checking
gradients against central finite differences; every op here preserves the
dtype of its inputs and never silently promotes.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf
from scipy.special import expit as _expit

__all__ = [
    "Tensor",
    "constant",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "power",
    "transpose",
    "reshape",
    "concat",
    "stack_rows",
    "gather_rows",
    "tsum",
    "tmean",
    "texp",
    "tlog",
    "tabs",
    "relu",
    "leaky_relu",
    "elu",
    "gelu",
    "sigmoid",
    "softmax",
]


class Tensor:
    """A node in the computation graph wrapping a numpy float array."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = ()):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._prev = _prev
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; all routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)


def constant(data, dtype=None) -> Tensor:
    """A tensor that never requires gradients."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64 if dtype is None else dtype)
    return Tensor(arr)


def _wrap(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != ref.dtype:
            raise ValueError(f"dtype mismatch: {x.dtype} vs {ref.dtype}")
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked:
        return Tensor(data)
    out = Tensor(data, requires_grad=True, _prev=tracked)
    out._backward = backward_fn(out)
    return out


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Gradients add into ``.grad`` of every reachable tensor that requires
    them; repeated calls without clearing keep accumulating.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    # Iterative topological sort: graphs can be deeper than the recursion limit.
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a = _wrap(a, a)
    b = _wrap(b, a)
    data = a.data + b.data

    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g, b.data.shape))

        return run

    return _result(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    ref = a if isinstance(a, Tensor) else b
    a = _wrap(a, ref)
    b = _wrap(b, ref)
    data = a.data - b.data

    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g, b.data.shape))

        return run

    return _result(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    a = _wrap(a, a)
    b = _wrap(b, a)
    data = a.data * b.data

    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

        return run

    return _result(data, (a, b), bwd)


def div(a, b) -> Tensor:
    ref = a if isinstance(a, Tensor) else b
    a = _wrap(a, ref)
    b = _wrap(b, ref)
    data = a.data / b.data

    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return run

    return _result(data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    data = -a.data

    def bwd(out):
        def run():
            _accumulate(a, -out.grad)

        return run

    return _result(data, (a,), bwd)


def power(a: Tensor, p: float) -> Tensor:
    if not isinstance(p, (int, float)):
        raise TypeError("power() supports scalar exponents only")
    data = a.data ** p

    def bwd(out):
        def run():
            _accumulate(a, out.grad * p * a.data ** (p - 1))

        return run

    return _result(data, (a,), bwd)


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(out):
        def run():
            g = out.grad
            if a.requires_grad:
                ga = g @ np.swapaxes(b.data, -1, -2)
                _accumulate(a, _unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ g
                _accumulate(b, _unbroadcast(gb, b.data.shape))

        return run

    return _result(data, (a, b), bwd)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    data = a.data.transpose(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def bwd(out):
        def run():
            _accumulate(a, out.grad.transpose(inverse))

        return run

    return _result(data, (a,), bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    data = a.data.reshape(shape)
    original = a.data.shape

    def bwd(out):
        def run():
            _accumulate(a, out.grad.reshape(original))

        return run

    return _result(data, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of no tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(out):
        def run():
            g = out.grad
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    _accumulate(t, g[tuple(idx)])

        return run

    return _result(data, tuple(tensors), bwd)


def stack_rows(vectors) -> Tensor:
    """Stack ``(1, d)`` row tensors into an ``(n, d)`` matrix."""
    return concat(list(vectors), axis=0)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0; duplicate indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather_rows expects a 1-d index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"row index out of range for shape {a.data.shape}")
    data = a.data[idx]

    def bwd(out):
        def run():
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, out.grad)
            _accumulate(a, buf)

        return run

    return _result(data, (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(out):
        def run():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False))

        return run

    return _result(data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(out):
        def run():
            _accumulate(a, out.grad * out.data)

        return run

    return _result(data, (a,), bwd)


def tlog(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(out):
        def run():
            _accumulate(a, out.grad / a.data)

        return run

    return _result(data, (a,), bwd)


def tabs(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def bwd(out):
        def run():
            _accumulate(a, out.grad * np.sign(a.data))

        return run

    return _result(data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def bwd(out):
        def run():
            _accumulate(a, out.grad * (a.data > 0))

        return run

    return _result(data, (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    data = np.where(a.data > 0, a.data, slope * a.data)

    def bwd(out):
        def run():
            _accumulate(a, out.grad * np.where(a.data > 0, 1.0, slope).astype(a.dtype))

        return run

    return _result(data, (a,), bwd)


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    data = np.where(a.data > 0, a.data, alpha * np.expm1(a.data))

    def bwd(out):
        def run():
            local = np.where(a.data > 0, 1.0, out.data + alpha).astype(a.dtype)
            _accumulate(a, out.grad * local)

        return run

    return _result(data, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    phi = 0.5 * (1.0 + _erf(a.data / math.sqrt(2.0)))
    data = (a.data * phi).astype(a.dtype, copy=False)

    def bwd(out):
        def run():
            pdf = np.exp(-0.5 * a.data * a.data) / math.sqrt(2.0 * math.pi)
            _accumulate(a, out.grad * (phi + a.data * pdf).astype(a.dtype, copy=False))

        return run

    return _result(data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    data = _expit(a.data).astype(a.dtype, copy=False)

    def bwd(out):
        def run():
            _accumulate(a, out.grad * out.data * (1.0 - out.data))

        return run

    return _result(data, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(out):
        def run():
            g = out.grad
            dot = (g * out.data).sum(axis=axis, keepdims=True)
            _accumulate(a, out.data * (g - dot))

        return run

    return _result(data, (a,), bwd)
