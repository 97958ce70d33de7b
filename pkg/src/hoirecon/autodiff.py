"""Minimal reverse-mode automatic differentiation over numpy arrays.

Tape-based: every operation records its parents and a closure that
accumulates gradients. Only the operations needed by the fusion block
and its losses are implemented. Gradients are verified against central
finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    # ------------------------------------------------------------ arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value + other.value, (self, other))

        def backward(grad):
            return (_unbroadcast(grad, self.shape), _unbroadcast(grad, other.shape))
        out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.value, (self,))
        out._backward = lambda grad: (-grad,)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value * other.value, (self, other))

        def backward(grad):
            return (_unbroadcast(grad * other.value, self.shape),
                    _unbroadcast(grad * self.value, other.shape))
        out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value / other.value, (self, other))

        def backward(grad):
            return (_unbroadcast(grad / other.value, self.shape),
                    _unbroadcast(-grad * self.value / other.value ** 2, other.shape))
        out._backward = backward
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value @ other.value, (self, other))

        def backward(grad):
            return (grad @ other.value.T, self.value.T @ grad)
        out._backward = backward
        return out

    def __pow__(self, exponent: float):
        out = Tensor(self.value ** exponent, (self,))
        out._backward = lambda grad: (grad * exponent * self.value ** (exponent - 1),)
        return out

    def __getitem__(self, key):
        out = Tensor(self.value[key], (self,))

        def backward(grad):
            full = np.zeros_like(self.value)
            np.add.at(full, key, grad)
            return (full,)
        out._backward = backward
        return out

    # -------------------------------------------------------------- backward

    def backward(self):
        if self.value.ndim != 0:
            raise ValueError("backward() requires a scalar output")
        order = []
        seen = set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for parent in node._parents:
                visit(parent)
            order.append(node)
        visit(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, grad in zip(node._parents, node._backward(node.grad)):
                if parent.grad is None:
                    parent.grad = grad
                else:
                    parent.grad = parent.grad + grad


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ------------------------------------------------------------------ functions

def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.value.reshape(shape), (x,))
    out._backward = lambda grad: (grad.reshape(x.shape),)
    return out


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(x.value.sum(axis=axis, keepdims=keepdims), (x,))

    def backward(grad):
        if axis is None:
            return (np.broadcast_to(grad, x.shape).copy(),)
        grad_k = grad if keepdims else np.expand_dims(grad, axis)
        return (np.broadcast_to(grad_k, x.shape).copy(),)
    out._backward = backward
    return out


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.value.size if axis is None else x.value.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def tanh(x: Tensor) -> Tensor:
    val = np.tanh(x.value)
    out = Tensor(val, (x,))
    out._backward = lambda grad: (grad * (1.0 - val ** 2),)
    return out


def sigmoid(x: Tensor) -> Tensor:
    val = 1.0 / (1.0 + np.exp(-x.value))
    out = Tensor(val, (x,))
    out._backward = lambda grad: (grad * val * (1.0 - val),)
    return out


def exp(x: Tensor) -> Tensor:
    val = np.exp(x.value)
    out = Tensor(val, (x,))
    out._backward = lambda grad: (grad * val,)
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.value), (x,))
    out._backward = lambda grad: (grad / x.value,)
    return out


def sqrt(x: Tensor) -> Tensor:
    val = np.sqrt(x.value)
    out = Tensor(val, (x,))
    out._backward = lambda grad: (grad * 0.5 / val,)
    return out


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp with zero gradient outside [low, high]."""
    mask = (x.value >= low) & (x.value <= high)
    out = Tensor(np.clip(x.value, low, high), (x,))
    out._backward = lambda grad: (grad * mask,)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2D tensor."""
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    val = expv / expv.sum(axis=1, keepdims=True)
    out = Tensor(val, (x,))

    def backward(grad):
        dot = (grad * val).sum(axis=1, keepdims=True)
        return (val * (grad - dot),)
    out._backward = backward
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis),
                 tuple(tensors))
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out._backward = lambda grad: tuple(np.split(grad, splits, axis=axis))
    return out


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2D tensor; duplicate indices accumulate gradient."""
    indices = np.asarray(indices, dtype=np.int64)
    out = Tensor(x.value[indices], (x,))

    def backward(grad):
        full = np.zeros_like(x.value)
        np.add.at(full, indices, grad)
        return (full,)
    out._backward = backward
    return out


def segment_max(x: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Row-wise max-pool of a 2D tensor into `num_segments` groups.

    Gradient flows to the first row attaining the max in each group
    (subgradient choice; ties are measure-zero for the random features
    used here). Every segment must be non-empty.
    """
    segments = np.asarray(segments, dtype=np.int64)
    rows, cols = x.value.shape
    val = np.full((num_segments, cols), -np.inf)
    np.maximum.at(val, segments, x.value)
    argrow = np.zeros((num_segments, cols), dtype=np.int64)
    for seg in range(num_segments):
        members = np.flatnonzero(segments == seg)
        if members.size == 0:
            raise ValueError(f"segment {seg} is empty")
        argrow[seg] = members[np.argmax(x.value[members], axis=0)]
    out = Tensor(val, (x,))

    def backward(grad):
        full = np.zeros_like(x.value)
        col_idx = np.broadcast_to(np.arange(cols), (num_segments, cols))
        np.add.at(full, (argrow, col_idx), grad)
        return (full,)
    out._backward = backward
    return out


def weighted_rows(x: Tensor, indices: np.ndarray, weights: np.ndarray) -> Tensor:
    """Fixed-weight interpolation: out[i] = sum_k weights[i, k] * x[indices[i, k]].

    `indices` (N, K) and `weights` (N, K) are constants (no gradient)."""
    indices = np.asarray(indices, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    val = (weights[:, :, np.newaxis] * x.value[indices]).sum(axis=1)
    out = Tensor(val, (x,))

    def backward(grad):
        full = np.zeros_like(x.value)
        np.add.at(full, indices, weights[:, :, np.newaxis] * grad[:, np.newaxis, :])
        return (full,)
    out._backward = backward
    return out
