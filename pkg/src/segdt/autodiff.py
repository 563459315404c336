"""Reverse-mode automatic differentiation over dense float64 arrays.

A small dynamic tape in the micrograd style: every operation records a
backward closure on its output node, and ``Tensor.backward()`` replays the
closures in reverse topological (creation) order.  Everything is float64 so
gradients can be checked against central finite differences at tight
tolerances.  Broadcasting is supported for elementwise ops and the batch
dimensions of matmul; nothing fancier is needed by the models built on top.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "concat",
    "stack",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class no_grad:
    """Context manager that disables tape recording (inference fast path)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
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
    """A float64 array plus optional gradient buffer and tape record."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self._backward = None
        self._parents: tuple = ()

    # -- basics ------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _result(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
            out.requires_grad = True
            out.grad = None  # allocated lazily during backward
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self):
        """Populate ``grad`` on every reachable tensor; ``self`` must be scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        if self._backward is None and not self.requires_grad:
            raise ValueError("backward() called on a tensor with no recorded operations")

        topo: list[Tensor] = []
        seen = set()

        def visit(node: Tensor):
            stack = [(node, iter(node._parents))]
            seen.add(id(node))
            while stack:
                cur, it = stack[-1]
                advanced = False
                for p in it:
                    if id(p) not in seen:
                        seen.add(id(p))
                        stack.append((p, iter(p._parents)))
                        advanced = True
                        break
                if not advanced:
                    topo.append(cur)
                    stack.pop()

        visit(self)
        for node in topo:
            if node.grad is None and (node.requires_grad or node._parents):
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic -------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = Tensor._coerce(other)
        out_data = self.data + other.data

        def backward(g):
            if self.grad is not None:
                self.grad += _unbroadcast(g, self.shape)
            if other.grad is not None:
                other.grad += _unbroadcast(g, other.shape)

        return Tensor._result(out_data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            if self.grad is not None:
                self.grad -= g

        return Tensor._result(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-Tensor._coerce(other))

    def __rsub__(self, other):
        return Tensor._coerce(other) + (-self)

    def __mul__(self, other):
        other = Tensor._coerce(other)
        out_data = self.data * other.data

        def backward(g):
            if self.grad is not None:
                self.grad += _unbroadcast(g * other.data, self.shape)
            if other.grad is not None:
                other.grad += _unbroadcast(g * self.data, other.shape)

        return Tensor._result(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other)
        out_data = self.data / other.data

        def backward(g):
            if self.grad is not None:
                self.grad += _unbroadcast(g / other.data, self.shape)
            if other.grad is not None:
                other.grad += _unbroadcast(-g * self.data / other.data**2, other.shape)

        return Tensor._result(out_data, (self, other), backward)

    def __rtruediv__(self, other):
        return Tensor._coerce(other) / self

    def __pow__(self, exponent: float):
        out_data = self.data**exponent

        def backward(g):
            if self.grad is not None:
                self.grad += g * exponent * self.data ** (exponent - 1)

        return Tensor._result(out_data, (self,), backward)

    # -- unary math --------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            if self.grad is not None:
                self.grad += g * out_data

        return Tensor._result(out_data, (self,), backward)

    def log(self):
        def backward(g):
            if self.grad is not None:
                self.grad += g / self.data

        return Tensor._result(np.log(self.data), (self,), backward)

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(g):
            if self.grad is not None:
                self.grad += g * (1.0 - out_data**2)

        return Tensor._result(out_data, (self,), backward)

    def relu(self):
        out_data = np.maximum(self.data, 0.0)

        def backward(g):
            if self.grad is not None:
                self.grad += g * (self.data > 0)

        return Tensor._result(out_data, (self,), backward)

    def gelu(self):
        """Exact (erf-based) GELU."""
        from scipy.special import erf

        x = self.data
        inv_sqrt2 = 1.0 / np.sqrt(2.0)
        cdf = 0.5 * (1.0 + erf(x * inv_sqrt2))
        out_data = x * cdf

        def backward(g):
            if self.grad is not None:
                pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
                self.grad += g * (cdf + x * pdf)

        return Tensor._result(out_data, (self,), backward)

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if self.grad is None:
                return
            if axis is None:
                self.grad += g
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self.grad += np.broadcast_to(gg, self.shape)

        return Tensor._result(out_data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation ------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.shape
        out_data = self.data.reshape(shape)

        def backward(g):
            if self.grad is not None:
                self.grad += g.reshape(old_shape)

        return Tensor._result(out_data, (self,), backward)

    def transpose(self, axes):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)

        def backward(g):
            if self.grad is not None:
                self.grad += g.transpose(inv)

        return Tensor._result(out_data, (self,), backward)

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def backward(g):
            if self.grad is not None:
                np.add.at(self.grad, idx, g)

        return Tensor._result(out_data, (self,), backward)

    # -- linear algebra ----------------------------------------------------

    def matmul(self, other):
        other = Tensor._coerce(other)
        try:
            out_data = self.data @ other.data
        except ValueError as exc:
            raise ShapeError(f"matmul: operands {self.shape} @ {other.shape}: {exc}") from None

        def backward(g):
            if self.grad is not None:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self.grad += _unbroadcast(ga, self.shape)
            if other.grad is not None:
                gb = np.swapaxes(self.data, -1, -2) @ g
                other.grad += _unbroadcast(gb, other.shape)

        return Tensor._result(out_data, (self, other), backward)

    __matmul__ = matmul

    # -- softmax / normalization -------------------------------------------

    def softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            if self.grad is not None:
                dot = (g * out_data).sum(axis=axis, keepdims=True)
                self.grad += out_data * (g - dot)

        return Tensor._result(out_data, (self,), backward)

    def layernorm(self, eps: float = 1e-5):
        """Normalize the last axis to zero mean, unit variance (no affine)."""
        x = self.data
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc**2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        out_data = xc * inv

        def backward(g):
            if self.grad is None:
                return
            n = x.shape[-1]
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * out_data).mean(axis=-1, keepdims=True)
            self.grad += inv * (g - gm - out_data * gy)

        return Tensor._result(out_data, (self,), backward)


def concat(tensors: list, axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.grad is not None:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.grad += g[tuple(sl)]

    return Tensor._result(out_data, tuple(tensors), backward)


def stack(tensors: list, axis: int = 0) -> Tensor:
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = np.split(g, len(tensors), axis=axis)
        for t, part in zip(tensors, parts):
            if t.grad is not None:
                t.grad += np.squeeze(part, axis=axis)

    return Tensor._result(out_data, tuple(tensors), backward)
