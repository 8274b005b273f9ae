"""Reverse-mode differentiation over dense float64 matrices.

Every value is a 2-D ``numpy`` array. A :class:`Node` records the op that
produced it and a closure that pushes its gradient back into its parents.
The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node", "DimensionError", "DomainError", "DegenerateInputError", "ContractError",
    "as_node", "constant", "matmul", "add", "sub", "mul", "scale", "neg", "relu",
    "log", "exp", "clamp_min", "elementwise", "row_softmax", "sort_columns_with_grad",
    "sum_all", "mean_all", "sum_rows", "mean_rows", "take_rows", "pick", "l2_norm",
    "normalize_rows", "transpose", "backward", "zero_grad",
]


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Node:
    """A matrix value in the graph, plus its accumulated gradient."""

    __slots__ = ("value", "_grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple["Node", ...] = (), backward_fn: Callable[[np.ndarray], None] | None = None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim == 0:
            value = value.reshape(1, 1)
        elif value.ndim == 1:
            value = value.reshape(1, -1)
        if value.ndim != 2:
            raise DimensionError(f"expected a 2-D matrix, got shape {value.shape}")
        self.value = value
        self._grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward_fn

    @property
    def grad(self) -> np.ndarray:
        # allocated on first use; most intermediate nodes never need one
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g: np.ndarray) -> None:
        self._grad = g

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(np.array(x, dtype=np.float64, copy=True))


def _result(value: np.ndarray, op: str, parents: Sequence[Node],
            backward_fn: Callable[[np.ndarray], None]) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(value, requires_grad=needs, op=op,
                parents=tuple(parents), backward_fn=backward_fn if needs else None)


def _acc(node: Node, g: np.ndarray) -> None:
    if node.requires_grad:
        node.grad += g


def _same_shape(name: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        _acc(a, g @ bv.T)
        _acc(b, av.T @ g)

    return _result(av @ bv, "matmul", (a, b), bw)


def add(a, b) -> Node:
    """Elementwise sum. ``b`` may also be a 1 x cols row vector (bias)."""
    a, b = as_node(a), as_node(b)
    if a.shape == b.shape:
        def bw(g):
            _acc(a, g)
            _acc(b, g)
    elif b.rows == 1 and b.cols == a.cols:
        def bw(g):
            _acc(a, g)
            _acc(b, g.sum(axis=0, keepdims=True))
    else:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.value + b.value, "add", (a, b), bw)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _same_shape("sub", a, b)

    def bw(g):
        _acc(a, g)
        _acc(b, -g)

    return _result(a.value - b.value, "sub", (a, b), bw)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value

    def bw(g):
        _acc(a, g * bv)
        _acc(b, g * av)

    return _result(av * bv, "mul", (a, b), bw)


def scale(a, k: float) -> Node:
    a = as_node(a)
    k = float(k)

    def bw(g):
        _acc(a, k * g)

    return _result(k * a.value, "scale", (a,), bw)


def neg(a) -> Node:
    return scale(a, -1.0)


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0

    def bw(g):
        _acc(a, g * mask)

    return _result(np.where(mask, a.value, 0.0), "relu", (a,), bw)


def log(a) -> Node:
    a = as_node(a)
    bad = np.argwhere(~(a.value > 0))
    if bad.size:
        i, j = bad[0]
        raise DomainError(f"log: non-positive entry {a.value[i, j]!r} at index ({i}, {j})")
    av = a.value

    def bw(g):
        _acc(a, g / av)

    return _result(np.log(av), "log", (a,), bw)


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)

    def bw(g):
        _acc(a, g * out)

    return _result(out, "exp", (a,), bw)


def clamp_min(a, lo: float) -> Node:
    """max(a, lo); gradient passes only where a > lo."""
    a = as_node(a)
    keep = a.value > lo

    def bw(g):
        _acc(a, g * keep)

    return _result(np.where(keep, a.value, lo), "clamp_min", (a,), bw)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "relu": relu,
    "log": log, "exp": exp, "scale": scale,
}


def elementwise(op_kind: str, *args) -> Node:
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*args)


def row_softmax(a) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        _acc(a, out * (g - (g * out).sum(axis=1, keepdims=True)))

    return _result(out, "row_softmax", (a,), bw)


def sort_columns_with_grad(a) -> Node:
    """Sort each column ascending; ties keep their original order."""
    a = as_node(a)
    perm = np.argsort(a.value, axis=0, kind="stable")
    out = np.take_along_axis(a.value, perm, axis=0)

    def bw(g):
        if a.requires_grad:
            scattered = np.empty_like(g)
            np.put_along_axis(scattered, perm, g, axis=0)
            a.grad += scattered

    return _result(out, "sort_columns", (a,), bw)


def sum_all(a) -> Node:
    a = as_node(a)

    def bw(g):
        _acc(a, np.full(a.shape, g[0, 0]))

    return _result(np.array([[a.value.sum()]]), "sum", (a,), bw)


def mean_all(a) -> Node:
    a = as_node(a)
    n = a.value.size

    def bw(g):
        _acc(a, np.full(a.shape, g[0, 0] / n))

    return _result(np.array([[a.value.mean()]]), "mean", (a,), bw)


def sum_rows(a) -> Node:
    """Per-row sum, returned as an (n x 1) column."""
    a = as_node(a)

    def bw(g):
        _acc(a, np.broadcast_to(g, a.shape))

    return _result(a.value.sum(axis=1, keepdims=True), "sum_rows", (a,), bw)


def mean_rows(a) -> Node:
    """Average of the rows, returned as a (1 x cols) row vector."""
    a = as_node(a)
    n = a.rows
    if n == 0:
        raise DimensionError("mean_rows: empty matrix")

    def bw(g):
        _acc(a, np.broadcast_to(g / n, a.shape))

    return _result(a.value.mean(axis=0, keepdims=True), "mean_rows", (a,), bw)


def take_rows(a, idx) -> Node:
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        if a.requires_grad:
            np.add.at(a.grad, idx, g)

    return _result(a.value[idx], "take_rows", (a,), bw)


def pick(a, cols) -> Node:
    """Entry ``a[i, cols[i]]`` for every row, as an (n x 1) column."""
    a = as_node(a)
    cols = np.asarray(cols, dtype=np.intp)
    if cols.shape != (a.rows,):
        raise DimensionError(f"pick: need {a.rows} column indices, got shape {cols.shape}")
    rows = np.arange(a.rows)

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.value)
            full[rows, cols] = g[:, 0]
            a.grad += full

    return _result(a.value[rows, cols].reshape(-1, 1), "pick", (a,), bw)


def l2_norm(a) -> Node:
    """Euclidean (Frobenius) norm as a 1x1 node. Subgradient at zero is zero."""
    a = as_node(a)
    n = float(np.sqrt(np.sum(a.value * a.value)))

    def bw(g):
        if n > 0.0:
            _acc(a, g[0, 0] * a.value / n)

    return _result(np.array([[n]]), "l2_norm", (a,), bw)


def normalize_rows(a) -> Node:
    a = as_node(a)
    norms = np.sqrt(np.sum(a.value * a.value, axis=1, keepdims=True))
    zero = np.flatnonzero(norms[:, 0] == 0.0)
    if zero.size:
        raise DegenerateInputError(f"normalize_rows: row {zero[0]} has zero norm")
    out = a.value / norms

    def bw(g):
        _acc(a, (g - out * (g * out).sum(axis=1, keepdims=True)) / norms)

    return _result(out, "normalize_rows", (a,), bw)


def transpose(a) -> Node:
    a = as_node(a)

    def bw(g):
        _acc(a, g.T)

    return _result(a.value.T.copy(), "transpose", (a,), bw)


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable trainable node.

    Intermediate gradients are scratch space and are reset on each call, so
    repeated calls only accumulate into leaves.
    """
    if root.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) root, got {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    for node in order:
        if node._backward is not None:
            node._grad = None
    root.grad += 1.0
    for node in reversed(order):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)


def zero_grad(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n.grad = np.zeros_like(n.value)
