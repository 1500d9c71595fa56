"""A minimal reverse-mode autodiff over numpy arrays.

Each :class:`Tensor` remembers its parents and a closure that pushes its
gradient to them.  ``backward`` topologically sorts the graph once and runs the
closures in reverse.  Only the handful of ops PoserNet needs are provided.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=float, copy=True)
        else:
            self.grad += g

    def backward(self, seed=None):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value) if seed is None else np.asarray(seed, dtype=float)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def constant(value) -> Tensor:
    return Tensor(value)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    def back(g):
        x._accumulate(g @ w.value.T)
        w._accumulate(x.value.T @ g)

    return Tensor(x.value @ w.value, (x, w), back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    def back(g):
        x._accumulate(g)
        b._accumulate(g.sum(axis=0))

    return Tensor(x.value + b.value, (x, b), back)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(x.value > 0, 1.0, slope)

    def back(g):
        x._accumulate(g * scale)

    return Tensor(x.value * scale, (x,), back)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``x[index]``."""

    def back(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, index, g)
        x._accumulate(gx)

    return Tensor(x.value[index], (x,), back)


def concat(parts: list[Tensor]) -> Tensor:
    """Column-wise concatenation."""
    widths = np.cumsum([0] + [p.value.shape[1] for p in parts])

    def back(g):
        for p, lo, hi in zip(parts, widths[:-1], widths[1:]):
            p._accumulate(g[:, lo:hi])

    return Tensor(np.concatenate([p.value for p in parts], axis=1), tuple(parts), back)


def segment_mean(x: Tensor, segment: np.ndarray, num_segments: int) -> Tensor:
    """Mean of the rows of ``x`` sharing a segment id; empty segments give zeros."""
    counts = np.bincount(segment, minlength=num_segments).astype(float)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    out = np.zeros((num_segments,) + x.value.shape[1:])
    np.add.at(out, segment, x.value)
    out *= inv[:, None]

    def back(g):
        x._accumulate(g[segment] * inv[segment][:, None])

    return Tensor(out, (x,), back)


def where_rows(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Row ``i`` from ``a`` where ``mask[i]`` else from ``b``."""
    m = mask[:, None].astype(float)

    def back(g):
        a._accumulate(g * m)
        b._accumulate(g * (1.0 - m))

    return Tensor(np.where(mask[:, None], a.value, b.value), (a, b), back)
