"""Small reverse-mode automatic differentiation engine over numpy arrays.

Every loss in this package is built from these primitives so that analytic
gradients come from one audited backward pass and can be checked against
central finite differences. The engine is deliberately small: float64 only,
no views, no in-place mutation of node data after construction.

Gradients at kinks (relu, maximum, amax ties) follow the usual subgradient
conventions; callers that gradient-check are responsible for staying away
from those points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the computation graph. Wraps a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, _parents=(self, other))
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.data.shape))
            out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, _parents=(self, other))
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.data.shape))
            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data / other.data, _parents=(self, other))
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g / other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(
                        _unbroadcast(-g * self.data / (other.data * other.data),
                                     other.data.shape))
            out._backward = bwd
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        out = Tensor(self.data ** exponent, _parents=(self,))
        if out.requires_grad:
            def bwd(g):
                self._accumulate(g * exponent * self.data ** (exponent - 1.0))
            out._backward = bwd
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data @ other.data, _parents=(self, other))
        if out.requires_grad:
            a, b = self.data, other.data
            def bwd(g):
                g = np.asarray(g)
                if self.requires_grad:
                    if a.ndim == 1 and b.ndim == 1:
                        self._accumulate(g * b)
                    elif a.ndim == 1:
                        self._accumulate(g @ b.T)
                    elif b.ndim == 1:
                        self._accumulate(np.outer(g, b))
                    else:
                        self._accumulate(g @ b.T)
                if other.requires_grad:
                    if a.ndim == 1 and b.ndim == 1:
                        other._accumulate(g * a)
                    elif a.ndim == 1:
                        other._accumulate(np.outer(a, g))
                    elif b.ndim == 1:
                        other._accumulate(a.T @ g)
                    else:
                        other._accumulate(a.T @ g)
            out._backward = bwd
        return out

    # -- elementwise functions ------------------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data), _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * out.data)
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g / self.data)
        return out

    def sqrt(self):
        out = Tensor(np.sqrt(self.data), _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * 0.5 / out.data)
        return out

    def tanh(self):
        out = Tensor(np.tanh(self.data), _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * (1.0 - out.data ** 2))
        return out

    def sigmoid(self):
        out = Tensor(_sigmoid(self.data), _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * out.data * (1.0 - out.data))
        return out

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), _parents=(self,))
        if out.requires_grad:
            mask = (self.data > 0.0).astype(np.float64)
            out._backward = lambda g: self._accumulate(g * mask)
        return out

    def abs(self):
        out = Tensor(np.abs(self.data), _parents=(self,))
        if out.requires_grad:
            sign = np.sign(self.data)
            out._backward = lambda g: self._accumulate(g * sign)
        return out

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.reshape(self.data.shape))
        return out

    @property
    def T(self):
        out = Tensor(self.data.T, _parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.T)
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], _parents=(self,))
        if out.requires_grad:
            def bwd(g):
                full = np.zeros_like(self.data)
                np.add.at(full, idx, g)
                self._accumulate(full)
            out._backward = bwd
        return out

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,))
        if out.requires_grad:
            def bwd(g):
                g = np.asarray(g)
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
            out._backward = bwd
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def amax(self, axis=None, keepdims: bool = False):
        """Max reduction. Gradient flows to the first argmax (ties excluded)."""
        out = Tensor(self.data.max(axis=axis, keepdims=keepdims), _parents=(self,))
        if out.requires_grad:
            def bwd(g):
                g = np.asarray(g)
                full = np.zeros_like(self.data)
                if axis is None:
                    full[np.unravel_index(np.argmax(self.data), self.data.shape)] = g
                else:
                    am = np.argmax(self.data, axis=axis)
                    gg = g if keepdims else np.expand_dims(g, axis)
                    np.put_along_axis(full, np.expand_dims(am, axis), gg, axis=axis)
                self._accumulate(full)
            out._backward = bwd
        return out

    def amin(self, axis=None, keepdims: bool = False):
        return -((-self).amax(axis=axis, keepdims=keepdims))

    # -- backward -------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this (scalar) node through the graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """Leaf tensor that receives gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def maximum(a, b) -> Tensor:
    """Elementwise max. Gradient routes to the larger operand (a on ties)."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.maximum(a.data, b.data), _parents=(a, b))
    if out.requires_grad:
        take_a = (a.data >= b.data).astype(np.float64)
        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * take_a, a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * (1.0 - take_a), b.data.shape))
        out._backward = bwd
    return out


def minimum(a, b) -> Tensor:
    return -maximum(-as_tensor(a), -as_tensor(b))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def bwd(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    t._accumulate(g[tuple(sl)])
        out._backward = bwd
    return out


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors))
    if out.requires_grad:
        def bwd(g):
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t._accumulate(np.take(g, i, axis=axis))
        out._backward = bwd
    return out


def logsumexp(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp; the max shift is treated as constant."""
    shift = np.max(x.data, axis=axis, keepdims=True)
    lse = (x - shift).exp().sum(axis=axis, keepdims=True).log() + shift
    if not keepdims and axis is not None:
        lse = lse.reshape(np.squeeze(lse.data, axis=axis).shape)
    elif not keepdims:
        lse = lse.reshape(())
    return lse


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = np.max(x.data, axis=axis, keepdims=True)
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) computed without overflow for large |x|."""
    # log sigmoid(x) = -log(1 + exp(-x)) = -logsumexp([0, -x]) elementwise
    zeros = constant(np.zeros_like(x.data))
    stacked = stack([zeros, -x], axis=0)
    return -logsumexp(stacked, axis=0)


def l2_normalize(x: Tensor, axis: int = -1, min_norm: float = 1e-12) -> Tensor:
    """Scale vectors along `axis` to unit L2 norm. Raises on zero vectors."""
    sq = (x * x).sum(axis=axis, keepdims=True)
    if np.any(sq.data < min_norm * min_norm):
        raise ValueError("cannot normalize zero-norm vector")
    return x / sq.sqrt()


# -- parameter registry / flat gradients ---------------------------------------


@dataclass
class GradientVector:
    """Flat gradient vector plus a name -> (offset, shape) registry."""

    values: np.ndarray
    registry: dict[str, tuple[int, tuple[int, ...]]]

    def get(self, name: str) -> np.ndarray:
        offset, shape = self.registry[name]
        length = int(np.prod(shape)) if shape else 1
        return self.values[offset:offset + length].reshape(shape)

    def names(self) -> list[str]:
        return list(self.registry)

    @property
    def total_length(self) -> int:
        return int(self.values.size)


def gather_gradient(params: dict[str, Tensor]) -> GradientVector:
    """Collect .grad of named leaf tensors into one flat GradientVector.

    Parameters with no gradient contribution get zeros. Registry order
    follows dict insertion order; every parameter appears exactly once.
    """
    registry: dict[str, tuple[int, tuple[int, ...]]] = {}
    chunks: list[np.ndarray] = []
    offset = 0
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        registry[name] = (offset, t.data.shape)
        chunks.append(np.ravel(g))
        offset += t.data.size
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return GradientVector(values=values, registry=registry)
