"""Minimal reverse-mode differentiation over float64 numpy arrays.

Covers exactly the operation set the dispatch models need: broadcast
arithmetic, (batched) matmul, relu/tanh, reshape, summation, and a graph
aggregation primitive with a rounding-order-canonical evaluation mode used
for exact permutation equivariance checks.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph; value is always a float64 ndarray."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(
        self,
        value,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Optional[Callable[[np.ndarray], None]] = None,
    ):
        self.value = np.asarray(value, dtype=float)
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += grad

    def __add__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.value + other.value, (self, other))

        def bwd(g):
            self._accumulate(_unbroadcast(g, self.value.shape))
            other._accumulate(_unbroadcast(g, other.value.shape))

        out._backward = bwd
        return out

    def __sub__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.value - other.value, (self, other))

        def bwd(g):
            self._accumulate(_unbroadcast(g, self.value.shape))
            other._accumulate(-_unbroadcast(g, other.value.shape))

        out._backward = bwd
        return out

    def __mul__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.value * other.value, (self, other))

        def bwd(g):
            self._accumulate(_unbroadcast(g * other.value, self.value.shape))
            other._accumulate(_unbroadcast(g * self.value, other.value.shape))

        out._backward = bwd
        return out

    def __matmul__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.value @ other.value, (self, other))

        def bwd(g):
            a, b = self.value, other.value
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            self._accumulate(_unbroadcast(ga, a.shape))
            other._accumulate(_unbroadcast(gb, b.shape))

        out._backward = bwd
        return out

    def scale(self, factor: float) -> "Tensor":
        out = Tensor(self.value * factor, (self,))

        def bwd(g):
            self._accumulate(g * factor)

        out._backward = bwd
        return out

    def mul_const(self, array: np.ndarray) -> "Tensor":
        """Elementwise product with a constant (no gradient into the constant)."""
        const = np.asarray(array, dtype=float)
        out = Tensor(self.value * const, (self,))

        def bwd(g):
            self._accumulate(_unbroadcast(g * const, self.value.shape))

        out._backward = bwd
        return out

    def relu(self) -> "Tensor":
        keep = self.value > 0.0
        out = Tensor(np.where(keep, self.value, 0.0), (self,))

        def bwd(g):
            self._accumulate(g * keep)

        out._backward = bwd
        return out

    def tanh(self) -> "Tensor":
        y = np.tanh(self.value)
        out = Tensor(y, (self,))

        def bwd(g):
            self._accumulate(g * (1.0 - y * y))

        out._backward = bwd
        return out

    def reshape(self, *shape: int) -> "Tensor":
        out = Tensor(self.value.reshape(*shape), (self,))

        def bwd(g):
            self._accumulate(g.reshape(self.value.shape))

        out._backward = bwd
        return out

    def sum(self) -> "Tensor":
        out = Tensor(self.value.sum(), (self,))

        def bwd(g):
            self._accumulate(np.full_like(self.value, float(g)))

        out._backward = bwd
        return out


def graph_aggregate(shift: np.ndarray, h: Tensor, exact: bool = False) -> Tensor:
    """Apply the constant shift operator along the node axis: out = S @ h.

    h has shape (..., N, F). With exact=True the per-node neighbor reduction
    sums contributions in ascending value order, so relabeling the nodes
    cannot perturb floating-point rounding (used for equivariance checks);
    the gradient is identical either way.
    """
    s = np.asarray(shift, dtype=float)
    if exact:
        # prod[..., i, j, f] = S[i, j] * h[..., j, f]; canonical order along j.
        prod = s[:, :, None] * h.value[..., None, :, :]
        value = np.sort(prod, axis=-2).sum(axis=-2)
    else:
        value = s @ h.value
    out = Tensor(value, (h,))

    def bwd(g):
        h._accumulate(_unbroadcast(s.T @ g, h.value.shape))

    out._backward = bwd
    return out


def backward(root: Tensor) -> None:
    """Reverse-topological gradient accumulation seeded with d(root)/d(root)=1."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
