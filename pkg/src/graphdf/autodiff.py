"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and remembers the inputs and local backward
rule of the op that produced it; ``backward()`` walks the tape once in
reverse topological order. Everything that is not a ``Tensor`` is treated
as a constant, and every helper here accepts plain arrays as well: when no
``Tensor`` is involved the helpers fall through to numpy, so the same
forward code serves both training (gradients wanted) and inference.

The op set is deliberately small: exactly what the recurrent cells, graph
filters and the Gaussian likelihood need.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np
from scipy.special import expit


class Tensor:
    """A node in the computation tape."""

    __slots__ = ("value", "grad", "_parents", "_backward")
    # Make numpy defer binary ops to our reflected operators instead of
    # trying to absorb Tensors into object arrays.
    __array_ufunc__ = None

    def __init__(self, value, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tape node."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        # Iterative DFS: unrolled recurrences produce tapes deeper than the
        # interpreter's recursion limit.
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; mixed Tensor/ndarray arithmetic routes through the
    # module-level helpers.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value_of(x) -> np.ndarray:
    """The underlying ndarray of a Tensor, or ``x`` coerced to an array."""
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _accumulate(node: Tensor, g: np.ndarray) -> None:
    if node.grad is None:
        # Copy: g may alias an upstream gradient (passthrough ops) or a view.
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, grad_a, grad_b):
    """Generic broadcasting binary op; constants stay off the tape."""
    a_is_tensor = isinstance(a, Tensor)
    b_is_tensor = isinstance(b, Tensor)
    av = a.value if a_is_tensor else np.asarray(a, dtype=np.float64)
    bv = b.value if b_is_tensor else np.asarray(b, dtype=np.float64)
    out_value = fwd(av, bv)
    if not (a_is_tensor or b_is_tensor):
        return out_value
    out = Tensor(out_value)

    def backward(g):
        if a_is_tensor:
            _accumulate(a, _unbroadcast(grad_a(g, av, bv), av.shape))
        if b_is_tensor:
            _accumulate(b, _unbroadcast(grad_b(g, av, bv), bv.shape))

    if a_is_tensor and b_is_tensor:
        out._parents = (a, b)
    else:
        out._parents = (a,) if a_is_tensor else (b,)
    out._backward = backward
    return out


def add(a, b):
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y,
                   lambda g, x, y: -g * x / (y * y))


def matmul(a, b):
    """2-D matrix product; either side may be a constant array."""
    av, bv = value_of(a), value_of(b)
    out_value = av @ bv
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return out_value
    out = Tensor(out_value)

    def backward(g):
        if isinstance(a, Tensor):
            _accumulate(a, g @ bv.T)
        if isinstance(b, Tensor):
            _accumulate(b, av.T @ g)

    out._parents = tuple(x for x in (a, b) if isinstance(x, Tensor))
    out._backward = backward
    return out


def spmm(op, x):
    """``op @ x`` where ``op`` is a constant scipy sparse matrix."""
    xv = value_of(x)
    out_value = op @ xv
    if not isinstance(x, Tensor):
        return out_value
    out = Tensor(out_value)
    op_t = op.T.tocsr()

    def backward(g):
        _accumulate(x, op_t @ g)

    out._parents = (x,)
    out._backward = backward
    return out


def _unary(x, fwd, grad):
    xv = value_of(x)
    out_value = fwd(xv)
    if not isinstance(x, Tensor):
        return out_value
    out = Tensor(out_value)

    def backward(g):
        _accumulate(x, grad(g, xv, out_value))

    out._parents = (x,)
    out._backward = backward
    return out


def tanh(x):
    return _unary(x, np.tanh, lambda g, xv, ov: g * (1.0 - ov * ov))


def sigmoid(x):
    return _unary(x, expit, lambda g, xv, ov: g * ov * (1.0 - ov))


def softplus(x):
    # log(1 + exp(x)) computed stably for large |x|.
    def fwd(xv):
        return np.logaddexp(0.0, xv)

    return _unary(x, fwd, lambda g, xv, ov: g * expit(xv))


def exp(x):
    return _unary(x, np.exp, lambda g, xv, ov: g * ov)


def log(x):
    return _unary(x, np.log, lambda g, xv, ov: g / xv)


def square(x):
    return _unary(x, np.square, lambda g, xv, ov: g * 2.0 * xv)


def sqrt(x):
    return _unary(x, np.sqrt, lambda g, xv, ov: g * 0.5 / ov)


def ssum(x, axis=None, keepdims=False):
    """Sum over an axis (or everything); name avoids shadowing built-ins."""
    xv = value_of(x)
    out_value = xv.sum(axis=axis, keepdims=keepdims)
    if not isinstance(x, Tensor):
        return out_value
    out = Tensor(out_value)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(x, np.broadcast_to(gg, xv.shape).copy())

    out._parents = (x,)
    out._backward = backward
    return out


def smean(x, axis=None, keepdims=False):
    xv = value_of(x)
    n = xv.size if axis is None else xv.shape[axis]
    return div(ssum(x, axis=axis, keepdims=keepdims), float(n))


def concat(parts: Iterable, axis=0):
    parts = list(parts)
    values = [value_of(p) for p in parts]
    out_value = np.concatenate(values, axis=axis)
    if not any(isinstance(p, Tensor) for p in parts):
        return out_value
    out = Tensor(out_value)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(part, Tensor):
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(part, g[tuple(index)])

    out._parents = tuple(p for p in parts if isinstance(p, Tensor))
    out._backward = backward
    return out


def getitem(x, key):
    xv = value_of(x)
    out_value = xv[key]
    if not isinstance(x, Tensor):
        return out_value
    out = Tensor(out_value)

    def backward(g):
        scatter = np.zeros_like(xv)
        np.add.at(scatter, key, g)
        _accumulate(x, scatter)

    out._parents = (x,)
    out._backward = backward
    return out


def reshape(x, shape):
    xv = value_of(x)
    out_value = xv.reshape(shape)
    if not isinstance(x, Tensor):
        return out_value
    out = Tensor(out_value)

    def backward(g):
        _accumulate(x, g.reshape(xv.shape))

    out._parents = (x,)
    out._backward = backward
    return out
