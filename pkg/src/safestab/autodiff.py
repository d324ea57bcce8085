"""Minimal reverse-mode automatic differentiation over numpy arrays.

Supports exactly the primitives the learner needs: affine maps, relu, tanh,
log, exp, square, elementwise minimum of two arrays, reductions, batched
matrix-vector products with a constant matrix, and user-supplied rowwise
scalar functions with an analytic gradient. Everything is float64.
"""

from __future__ import annotations

import numpy as np


class Node:
    """A tensor in the computation graph.

    The graph of nodes is the gradient tape: each node records the primitive
    that produced it via ``parents``, a tuple of (Node, vjp) pairs where the
    vjp maps the output cotangent to that parent's gradient contribution.
    """

    __slots__ = ("value", "parents", "grad")

    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    # operator sugar; constants are allowed on either side
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_node(other)))

    def __rsub__(self, other):
        return add(as_node(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, (int, float, np.floating, np.ndarray)):
        return Node(x)
    raise TypeError(f"unsupported operand for autodiff: {type(x).__name__}")


def _unbroadcast(grad, shape):
    # reduce a broadcasted gradient back to the parent's shape
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(
        a.value + b.value,
        (
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
    )


def neg(a) -> Node:
    a = as_node(a)
    return Node(-a.value, ((a, lambda g: -g),))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(
        a.value * b.value,
        (
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ),
    )


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return Node(
        a.value @ b.value,
        (
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ),
    )


def relu(a) -> Node:
    a = as_node(a)
    mask = (a.value > 0).astype(np.float64)
    return Node(a.value * mask, ((a, lambda g: g * mask),))


def tanh(a) -> Node:
    a = as_node(a)
    t = np.tanh(a.value)
    return Node(t, ((a, lambda g: g * (1.0 - t * t)),))


def log(a) -> Node:
    a = as_node(a)
    return Node(np.log(a.value), ((a, lambda g: g / a.value),))


def exp(a) -> Node:
    a = as_node(a)
    e = np.exp(a.value)
    return Node(e, ((a, lambda g: g * e),))


def square(a) -> Node:
    a = as_node(a)
    return Node(a.value**2, ((a, lambda g: g * 2.0 * a.value),))


def minimum(a, b) -> Node:
    """Elementwise min; the gradient routes to the attaining branch.

    Exact ties route to the first argument.
    """
    a, b = as_node(a), as_node(b)
    take_a = (a.value <= b.value).astype(np.float64)
    return Node(
        np.minimum(a.value, b.value),
        (
            (a, lambda g: _unbroadcast(g * take_a, a.value.shape)),
            (b, lambda g: _unbroadcast(g * (1.0 - take_a), b.value.shape)),
        ),
    )


def clip(a, lo, hi) -> Node:
    # zero gradient outside [lo, hi], as in standard log-std clamping
    a = as_node(a)
    mask = ((a.value >= lo) & (a.value <= hi)).astype(np.float64)
    return Node(np.clip(a.value, lo, hi), ((a, lambda g: g * mask),))


def mean(a) -> Node:
    a = as_node(a)
    n = a.value.size
    return Node(a.value.mean(), ((a, lambda g: np.full(a.value.shape, g / n)),))


def total(a) -> Node:
    a = as_node(a)
    return Node(a.value.sum(), ((a, lambda g: np.full(a.value.shape, g)),))


def sum_rows(a) -> Node:
    """Sum over the last axis of a 2-D array, giving one scalar per row."""
    a = as_node(a)
    if a.value.ndim != 2:
        raise TypeError("sum_rows expects a 2-D array")
    return Node(
        a.value.sum(axis=1),
        ((a, lambda g: np.repeat(g[:, None], a.value.shape[1], axis=1)),),
    )


def columns(a, start, stop) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise TypeError("columns expects a 2-D array")

    def vjp(g):
        out = np.zeros_like(a.value)
        out[:, start:stop] = g
        return out

    return Node(a.value[:, start:stop], ((a, vjp),))


def concat_cols(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    na = a.value.shape[1]
    return Node(
        np.concatenate([a.value, b.value], axis=1),
        (
            (a, lambda g: g[:, :na]),
            (b, lambda g: g[:, na:]),
        ),
    )


def bmatvec(mats, u) -> Node:
    """Batched matrix-vector product with a constant stack of matrices.

    ``mats`` is a constant (B, n, m) array, ``u`` a (B, m) node; the result
    is (B, n). Used for control-affine next-state prediction.
    """
    mats = np.asarray(mats, dtype=np.float64)
    u = as_node(u)
    return Node(
        np.einsum("bnm,bm->bn", mats, u.value),
        ((u, lambda g: np.einsum("bnm,bn->bm", mats, g)),),
    )


def rowwise_scalar(fn, grad_fn, x) -> Node:
    """Apply a scalar-valued function of the state to each row of ``x``.

    ``fn`` maps a (n,) vector to a scalar, ``grad_fn`` to its (n,) gradient.
    Lets analytic barrier functions participate in backprop without
    re-expressing them in tape primitives.
    """
    x = as_node(x)
    vals = np.array([fn(row) for row in x.value], dtype=np.float64)
    grads = np.array([grad_fn(row) for row in x.value], dtype=np.float64)
    return Node(vals, ((x, lambda g: g[:, None] * grads),))


def backward(out: Node) -> None:
    """Accumulate gradients of a scalar output into every reachable node."""
    if out.value.shape != ():
        raise ValueError("backward requires a scalar output")
    order = []
    seen = set()

    def visit(node):
        stack = [(node, False)]
        while stack:
            n, done = stack.pop()
            if done:
                order.append(n)
                continue
            if id(n) in seen:
                continue
            seen.add(id(n))
            stack.append((n, True))
            for parent, _ in n.parents:
                stack.append((parent, False))

    visit(out)
    for n in order:
        n.grad = np.zeros(n.value.shape)
    out.grad = np.ones(())
    for n in reversed(order):
        g = n.grad
        for parent, vjp in n.parents:
            parent.grad = parent.grad + vjp(g)


def value_and_grad(f, params):
    """Evaluate a scalar function of a list of parameter arrays.

    Returns (value, grads) with one gradient array per parameter, matching
    shapes. ``f`` receives the parameters wrapped as graph nodes and must
    build its result from the primitives of this module.
    """
    leaves = [Node(np.asarray(p, dtype=np.float64)) for p in params]
    out = f(leaves)
    if not isinstance(out, Node):
        raise TypeError("function must return an autodiff node")
    backward(out)
    return float(out.value), [
        leaf.grad if leaf.grad is not None else np.zeros(leaf.value.shape)
        for leaf in leaves
    ]
