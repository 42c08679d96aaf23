"""Minimal reverse-mode autodiff over numpy arrays.

Just enough ops to express fully connected networks, their input-coordinate
tangents, and the scalar losses built on both, so gradients of losses that
contain input-derivative terms come out exact (the tangent propagation is
itself built from these ops, and the reverse pass differentiates through it).

Everything is float64 and deterministic: identical inputs give bit-identical
values and gradients.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "backward", "grad_params", "exp", "log", "tanh", "sigmoid", "clip", "concat_cols"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over axes that were broadcast so it matches `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the computation graph wrapping a float64 numpy array."""

    # Make numpy defer binary ops to our reflected operators instead of
    # building object arrays.
    __array_ufunc__ = None

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    def _accum(self, g: np.ndarray) -> None:
        # .grad is only ever rebound, never mutated in place, so aliasing is safe
        self.grad = g if self.grad is None else self.grad + g

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out = Tensor(self.value + other.value, (self, other))

        def back():
            self._accum(_unbroadcast(out.grad, self.value.shape))
            other._accum(_unbroadcast(out.grad, other.value.shape))

        out._backward = back
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        out = Tensor(self.value - other.value, (self, other))

        def back():
            self._accum(_unbroadcast(out.grad, self.value.shape))
            other._accum(_unbroadcast(-out.grad, other.value.shape))

        out._backward = back
        return out

    def __rsub__(self, other):
        return _as_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out = Tensor(self.value * other.value, (self, other))

        def back():
            self._accum(_unbroadcast(out.grad * other.value, self.value.shape))
            other._accum(_unbroadcast(out.grad * self.value, other.value.shape))

        out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        out = Tensor(self.value / other.value, (self, other))

        def back():
            self._accum(_unbroadcast(out.grad / other.value, self.value.shape))
            other._accum(_unbroadcast(-out.grad * self.value / (other.value * other.value), other.value.shape))

        out._backward = back
        return out

    def __rtruediv__(self, other):
        return _as_tensor(other).__truediv__(self)

    def __neg__(self):
        out = Tensor(-self.value, (self,))

        def back():
            self._accum(-out.grad)

        out._backward = back
        return out

    def __pow__(self, exponent: float):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are differentiable here")
        out = Tensor(self.value ** exponent, (self,))

        def back():
            self._accum(out.grad * exponent * self.value ** (exponent - 1))

        out._backward = back
        return out

    def __matmul__(self, other):
        other = _as_tensor(other)
        if self.value.ndim != 2 or other.value.ndim != 2:
            raise ValueError("matmul is 2-D only")
        out = Tensor(self.value @ other.value, (self, other))

        def back():
            self._accum(out.grad @ other.value.T)
            other._accum(self.value.T @ out.grad)

        out._backward = back
        return out

    def __getitem__(self, idx):
        out = Tensor(self.value[idx], (self,))

        def back():
            g = np.zeros_like(self.value)
            g[idx] = out.grad
            self._accum(g)

        out._backward = back
        return out

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None):
        out = Tensor(self.value.sum(axis=axis), (self,))

        def back():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.value.shape).copy())

        out._backward = back
        return out

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise functions --------------------------------------------------


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.exp(x.value), (x,))

    def back():
        x._accum(out.grad * out.value)

    out._backward = back
    return out


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.log(x.value), (x,))

    def back():
        x._accum(out.grad / x.value)

    out._backward = back
    return out


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.tanh(x.value), (x,))

    def back():
        x._accum(out.grad * (1.0 - out.value * out.value))

    out._backward = back
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # numerically stable logistic
    v = np.where(x.value >= 0, 1.0 / (1.0 + np.exp(-x.value)), np.exp(x.value) / (1.0 + np.exp(x.value)))
    out = Tensor(v, (x,))

    def back():
        x._accum(out.grad * out.value * (1.0 - out.value))

    out._backward = back
    return out


def concat_cols(parts) -> Tensor:
    """Concatenate (m, k_i) tensors along columns into one (m, sum k_i) tensor."""
    parts = [_as_tensor(p) for p in parts]
    if any(p.value.ndim != 2 for p in parts):
        raise ValueError("concat_cols expects 2-D tensors")
    out = Tensor(np.concatenate([p.value for p in parts], axis=1), tuple(parts))
    widths = [p.value.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def back():
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p._accum(out.grad[:, lo:hi])

    out._backward = back
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is passed through inside, zero outside."""
    x = _as_tensor(x)
    out = Tensor(np.clip(x.value, lo, hi), (x,))
    mask = (x.value >= lo) & (x.value <= hi)

    def back():
        x._accum(out.grad * mask)

    out._backward = back
    return out


# -- backward pass -----------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad for every node in loss's graph.

    Existing .grad values in the graph are reset first; `loss` must be scalar.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.value.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward()


def grad_params(loss: Tensor, params) -> list:
    """Gradient of a scalar loss with respect to the given parameter tensors.

    Parameters not reached by the graph get exact zeros (stale gradients from
    earlier backward passes are cleared first).
    """
    for p in params:
        p.grad = None
    backward(loss)
    return [np.zeros_like(p.value) if p.grad is None else np.array(p.grad) for p in params]
