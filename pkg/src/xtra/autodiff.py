"""Reverse-mode differentiation on numpy arrays, scoped to dense-net training.

A Tensor wraps a float64 ndarray plus the closure that routes an output
gradient back to its parents. The op set is exactly what the training losses
need (affine layers, pointwise nonlinearities, log-softmax, column slicing,
reductions, stop-gradient, backward rescaling); this is not a general autodiff
library and does not try to be.

All values are float64. Gradient accumulation order is fixed by construction
order, so repeated runs on identical inputs produce bit-identical gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError

Array = np.ndarray


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(
        self,
        value,
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[Array], tuple[Array, ...]] | None = None,
    ):
        self.value = _as_f64(value)
        self.grad: Array | None = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def leaf(value) -> Tensor:
    """A differentiable input (parameters)."""
    return Tensor(value)


def constant(value) -> Tensor:
    """A non-differentiable input (data, targets)."""
    t = Tensor(value)
    t._vjp = None
    return t


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.value + b.value

    def vjp(g: Array):
        ga = g
        gb = g
        # bias broadcast [B, D] + [D]
        if b.value.ndim < g.ndim:
            gb = g.sum(axis=0)
        if a.value.ndim < g.ndim:
            ga = g.sum(axis=0)
        return ga, gb

    return Tensor(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.value - b.value

    def vjp(g: Array):
        gb = -g
        if b.value.ndim < g.ndim:
            gb = gb.sum(axis=0)
        ga = g
        if a.value.ndim < g.ndim:
            ga = ga.sum(axis=0)
        return ga, gb

    return Tensor(out, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = a.value * b.value

        def vjp(g: Array):
            ga = g * b.value
            gb = g * a.value
            if a.value.ndim < g.ndim:
                ga = ga.sum(axis=0)
            if b.value.ndim < g.ndim:
                gb = gb.sum(axis=0)
            return ga, gb

        return Tensor(out, (a, b), vjp)
    s = float(b)
    return Tensor(a.value * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.value @ b.value

    def vjp(g: Array):
        return g @ b.value.T, a.value.T @ g

    return Tensor(out, (a, b), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0.0

    def vjp(g: Array):
        return (g * mask,)

    return Tensor(a.value * mask, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def vjp(g: Array):
        return (g * (1.0 - out * out),)

    return Tensor(out, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax of a [B, D] (or [D]) array."""
    x = a.value
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g: Array):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return Tensor(out, (a,), vjp)


def softmax(a: Tensor) -> Tensor:
    x = a.value
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g: Array):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor(out, (a,), vjp)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    out = np.concatenate([p.value for p in parts], axis=-1)
    widths = [p.value.shape[-1] for p in parts]
    edges = np.cumsum([0] + widths)

    def vjp(g: Array):
        return tuple(g[..., edges[i] : edges[i + 1]] for i in range(len(parts)))

    return Tensor(out, tuple(parts), vjp)


def cols(a: Tensor, lo: int, hi: int) -> Tensor:
    out = a.value[..., lo:hi]

    def vjp(g: Array):
        full = np.zeros_like(a.value)
        full[..., lo:hi] = g
        return (full,)

    return Tensor(out, (a,), vjp)


def row_sum(a: Tensor) -> Tensor:
    """[B, D] -> [B]."""
    out = a.value.sum(axis=-1)

    def vjp(g: Array):
        return (np.repeat(g[..., None], a.value.shape[-1], axis=-1),)

    return Tensor(out, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    def vjp(g: Array):
        return (np.full_like(a.value, float(g)),)

    return Tensor(a.value.sum(), (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size

    def vjp(g: Array):
        return (np.full_like(a.value, float(g) / n),)

    return Tensor(a.value.mean(), (a,), vjp)


def detach(a: Tensor) -> Tensor:
    """Stop-gradient: forward identity, no backward flow."""
    return Tensor(a.value.copy())


def grad_scale(a: Tensor, factor: float) -> Tensor:
    """Forward identity; backward gradient multiplied by `factor`."""

    def vjp(g: Array):
        return (g * factor,)

    return Tensor(a.value, (a,), vjp)


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate gradients of `root` (a scalar) into every reachable Tensor.

    Raises NumericError if the root value is non-finite; gradient finiteness
    of leaves is the caller's concern (they know segment names).
    """
    if root.value.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    if not np.isfinite(root.value).all():
        raise NumericError("non-finite loss value")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        parent_grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.value)
            parent.grad += g
