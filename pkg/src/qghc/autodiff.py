"""Reverse-mode differentiation over a dynamically recorded graph.

Every forward pass records a fresh tape of ``Node`` objects; ``backward``
walks it once in reverse topological order and accumulates gradients by sum
over all paths. Kernels that are themselves outputs of upstream operations
(the hypernetwork path) differentiate like any other node, which is the whole
point of recording dynamically instead of compiling a static graph.

This module owns the generic math primitives; the neural building blocks
with bespoke backward rules live in ``nn``.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tensor

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    """One value in the computation graph.

    ``rule`` maps the output gradient (ndarray, same shape as ``value``) to a
    tuple of parent gradients aligned with ``parents``; entries may be None
    for parents that do not require gradients.
    """

    __slots__ = ("value", "parents", "rule", "requires_grad")

    def __init__(self, value: Tensor, parents: tuple["Node", ...] = (),
                 rule: Callable[[np.ndarray], tuple] | None = None,
                 requires_grad: bool = False):
        self.value = value
        self.parents = parents
        self.rule = rule
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def array(self) -> np.ndarray:
        return self.value.array

    def item(self) -> float:
        return self.value.item()

    def __repr__(self):
        kind = "leaf" if not self.parents else "op"
        return f"Node({kind}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def leaf(value: Tensor, requires_grad: bool = True) -> Node:
    return Node(value, (), None, requires_grad)


def constant(value: Tensor) -> Node:
    return Node(value, (), None, False)


def apply_op(value: Tensor, parents: tuple[Node, ...], rule) -> Node:
    """Record an op node, or a detached constant when recording is off."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Node(value, parents, rule, True)
    return Node(value, (), None, False)


class Parameter:
    """Named trainable leaf with a role tag.

    role is "qd" for weights feeding the kernel-prediction FC stack
    (question-dependent) and "qi" for everything trained freely.
    """

    ROLES = ("qd", "qi")

    def __init__(self, name: str, value: Tensor, role: str, bias: bool = False):
        if role not in self.ROLES:
            raise ValueError(f"parameter {name!r} has invalid role {role!r}")
        self.name = name
        self.node = leaf(value, requires_grad=True)
        self.role = role
        self.bias = bias

    @property
    def value(self) -> Tensor:
        return self.node.value

    @property
    def shape(self):
        return self.node.value.shape

    def assign(self, array: np.ndarray) -> None:
        """Replace the stored values (optimizer step / checkpoint load)."""
        if array.shape != self.node.value.shape:
            raise ShapeError(f"assign shape {array.shape} != {self.node.value.shape}")
        self.node.value = Tensor(array.astype(self.node.value.dtype, copy=False))

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, role={self.role!r})"


# ---------------------------------------------------------------------------
# primitive differentiable ops
# ---------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.array + b.array)
    return apply_op(out, (a, b), lambda g: (g, g))


def mul(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.array * b.array)
    return apply_op(out, (a, b), lambda g: (g * b.array, g * a.array))


def scale_add(a: Node, alpha: float = 1.0, beta: float = 0.0) -> Node:
    """alpha * a + beta, elementwise with scalar coefficients."""
    dt = a.value.dtype.type
    out = Tensor(a.array * dt(alpha) + dt(beta))
    return apply_op(out, (a,), lambda g: (g * dt(alpha),))


def relu(a: Node) -> Node:
    out = Tensor(np.maximum(a.array, 0))
    mask = a.array > 0
    return apply_op(out, (a,), lambda g: (g * mask,))


def sigmoid(a: Node) -> Node:
    s = 1.0 / (1.0 + np.exp(-a.array))
    s = s.astype(a.value.dtype, copy=False)
    out = Tensor(s)
    return apply_op(out, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Node) -> Node:
    t = np.tanh(a.array)
    out = Tensor(t)
    return apply_op(out, (a,), lambda g: (g * (1.0 - t * t),))


def matmul(a: Node, b: Node) -> Node:
    if a.value.rank != 2 or b.value.rank != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes: {a.shape} x {b.shape}")
    out = Tensor(a.array @ b.array)

    def rule(g):
        ga = g @ b.array.T if a.requires_grad else None
        gb = a.array.T @ g if b.requires_grad else None
        return ga, gb

    return apply_op(out, (a, b), rule)


def reshape(a: Node, shape: Sequence[int]) -> Node:
    orig = a.shape
    out = Tensor(a.array.reshape(tuple(shape)))
    return apply_op(out, (a,), lambda g: (g.reshape(orig),))


def concat(nodes: Sequence[Node], axis: int) -> Node:
    out = Tensor(np.concatenate([n.array for n in nodes], axis=axis))
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op(out, tuple(nodes), rule)


def slice_axis(a: Node, axis: int, start: int, stop: int) -> Node:
    index = [slice(None)] * a.value.rank
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(a.array[index])

    def rule(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return apply_op(out, (a,), rule)


def tile_batch(a: Node, batch: int) -> Node:
    """Prepend a batch axis by repetition; gradient sums over the copies."""
    out = Tensor(np.broadcast_to(a.array, (batch,) + a.shape).copy())
    return apply_op(out, (a,), lambda g: (g.sum(axis=0),))


def sum_all(a: Node) -> Node:
    out = Tensor(np.asarray([a.array.sum()], dtype=a.value.dtype))

    def rule(g):
        return (np.full(a.shape, g.reshape(-1)[0], dtype=g.dtype),)

    return apply_op(out, (a,), rule)


def mean_all(a: Node) -> Node:
    n = a.value.size
    out = Tensor(np.asarray([a.array.mean()], dtype=a.value.dtype))

    def rule(g):
        return (np.full(a.shape, g.reshape(-1)[0] / n, dtype=g.dtype),)

    return apply_op(out, (a,), rule)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class Grads:
    """Gradient map from backward(); leaves that never reached the loss read as zeros."""

    def __init__(self, table: dict):
        self._table = table

    def get(self, node: Node) -> Tensor:
        arr = self._table.get(id(node))
        if arr is None:
            return Tensor(np.zeros(node.shape, dtype=node.value.dtype))
        return Tensor(arr)

    def raw(self, node: Node) -> np.ndarray:
        arr = self._table.get(id(node))
        if arr is None:
            return np.zeros(node.shape, dtype=node.value.dtype)
        return arr

    def __contains__(self, node: Node) -> bool:
        return id(node) in self._table


def _topo_order(root: Node) -> list[Node]:
    # Iterative post-order DFS; graphs are small but may out-depth recursion.
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> Grads:
    """Accumulate d(loss)/d(node) for every node on the tape below ``loss``."""
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    table: dict[int, np.ndarray] = {
        id(loss): np.ones(loss.shape, dtype=loss.value.dtype)
    }
    for node in reversed(_topo_order(loss)):
        g = table.get(id(node))
        if g is None or node.rule is None:
            continue
        parent_grads = node.rule(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = table.get(id(parent))
            if acc is None:
                table[id(parent)] = pg.astype(parent.value.dtype, copy=False)
            else:
                table[id(parent)] = acc + pg
    return Grads(table)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

class FiniteDiffEntry:
    __slots__ = ("param", "coord", "analytic", "numeric", "rel_err")

    def __init__(self, param, coord, analytic, numeric, rel_err):
        self.param = param
        self.coord = coord
        self.analytic = analytic
        self.numeric = numeric
        self.rel_err = rel_err


class FiniteDiffReport:
    def __init__(self, entries: list[FiniteDiffEntry], tol: float):
        self.entries = entries
        self.tol = tol

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def worst(self) -> FiniteDiffEntry | None:
        return max(self.entries, key=lambda e: e.rel_err, default=None)


def finite_diff_check(f: Callable[[], Node], params: Sequence[Parameter],
                      eps: float = 1e-5, tol: float = 1e-4,
                      max_coords_per_param: int = 24,
                      rng: np.random.Generator | None = None) -> FiniteDiffReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8). Requires
    64-bit parameters; central differences are unreliable in float32.
    """
    if not (1e-5 <= eps <= 1e-2):
        raise ValueError(f"eps {eps} outside [1e-5, 1e-2]")
    for p in params:
        if p.value.dtype != np.float64:
            raise ValueError(f"finite_diff_check requires float64 parameters; "
                             f"{p.name} is {p.value.dtype}")
    if rng is None:
        rng = np.random.default_rng(0)

    loss = f()
    if not np.isfinite(loss.array).all():
        raise FloatingPointError("non-finite loss at the unperturbed point")
    grads = backward(loss)

    entries: list[FiniteDiffEntry] = []
    for p in params:
        analytic = grads.raw(p.node).reshape(-1)
        size = p.value.size
        if size <= max_coords_per_param:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords_per_param, replace=False)
        flat = p.node.value.array.reshape(-1)
        for c in coords:
            c = int(c)
            saved = flat[c]
            flat[c] = saved + eps
            up = f().item()
            flat[c] = saved - eps
            down = f().item()
            flat[c] = saved
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(
                    f"non-finite loss while probing {p.name}[{c}]")
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[c])
            denom = max(abs(a), abs(numeric), 1e-8)
            entries.append(FiniteDiffEntry(p.name, c, a, numeric,
                                           abs(a - numeric) / denom))
    return FiniteDiffReport(entries, tol)
