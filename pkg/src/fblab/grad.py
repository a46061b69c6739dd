"""Minimal reverse-mode differentiation over dense numpy arrays.

A :class:`Tape` records nodes in creation order, which is a topological order,
so :func:`backward` is a single reverse sweep. Operations broadcast like numpy
and their pullbacks sum gradients back over broadcast axes.

    tape = Tape()
    x = tape.param(np.ones(3))
    loss = frob_sq(x)
    grads = backward(tape, loss)      # {x: 2 * ones}
"""

import math

import numpy as np
from scipy.special import erf

from .errors import NumericError, UsageError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Node:
    """A value on a tape. ``requires_grad`` is False for constants."""

    __slots__ = ("value", "parents", "pullback", "requires_grad", "grad", "name", "tape")

    def __init__(self, tape, value, parents=(), pullback=None, requires_grad=False, name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.pullback = pullback
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, name={self.name!r})"


class Tape:
    """Append-only record of nodes for one forward pass."""

    def __init__(self):
        self.nodes = []

    def _record(self, value, parents, pullback):
        needs = any(p.requires_grad for p in parents)
        node = Node(self, value, parents if needs else (), pullback if needs else None, needs)
        if needs:
            self.nodes.append(node)
        return node

    def param(self, value, name=None):
        """A differentiable leaf. The array is copied."""
        node = Node(self, np.array(value, dtype=float), requires_grad=True, name=name)
        self.nodes.append(node)
        return node

    def const(self, value):
        return Node(self, np.asarray(value, dtype=float))


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise UsageError("at least one operand must be a Node")


def _lift(tape, x):
    return x if isinstance(x, Node) else tape.const(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap(x):
    return np.swapaxes(x, -1, -2)


def add(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    return tape._record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    return tape._record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    """Elementwise product with broadcasting."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape._record(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def scale(a, c):
    c = float(c)
    return a.tape._record(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    """Batched matrix product (numpy ``@`` semantics for ndim >= 2)."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise UsageError("matmul operands must be at least 2-D; reshape vectors explicitly")

    if bv.ndim == 2 and av.ndim > 2:
        # stacked @ single matrix: one flat GEMM instead of a loop over the stack
        flat = av.reshape(-1, av.shape[-1])

        def pullback(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bv.T).reshape(av.shape), flat.T @ g2

        return tape._record((flat @ bv).reshape(av.shape[:-1] + bv.shape[-1:]), (a, b), pullback)

    def pullback(g):
        return _unbroadcast(g @ _swap(bv), av.shape), _unbroadcast(_swap(av) @ g, bv.shape)

    return tape._record(av @ bv, (a, b), pullback)


def transpose(a):
    """Swap the last two axes."""
    return a.tape._record(_swap(a.value), (a,), lambda g: (_swap(g),))


def reshape(a, shape):
    old = a.shape
    return a.tape._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a, index):
    """Fancy indexing ``a.value[index]``; the pullback scatter-adds."""
    shape = a.shape

    def pullback(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return a.tape._record(a.value[index], (a,), pullback)


def concat(nodes, axis=-1):
    tape = _tape_of(*nodes)
    nodes = [_lift(tape, x) for x in nodes]
    sizes = np.cumsum([x.shape[axis] for x in nodes])[:-1]
    return tape._record(
        np.concatenate([x.value for x in nodes], axis=axis),
        tuple(nodes),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def relu(a):
    mask = a.value > 0
    return a.tape._record(a.value * mask, (a,), lambda g: (g * mask,))


def gelu(a):
    """Exact GELU ``x * Phi(x)`` with the erf-based normal CDF."""
    x = a.value
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return a.tape._record(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def softplus(a):
    x = a.value
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return a.tape._record(out, (a,), lambda g: (g * sig,))


def tanh(a):
    t = np.tanh(a.value)
    return a.tape._record(t, (a,), lambda g: (g * (1.0 - t * t),))


def softmax(a):
    """Softmax over the last axis."""
    x = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=-1, keepdims=True)

    def pullback(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return a.tape._record(p, (a,), pullback)


def total(a, axis=None):
    """Sum over ``axis`` (all axes when None)."""
    shape = a.shape
    if axis is None:
        return a.tape._record(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))
    axis = axis % a.ndim

    def pullback(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return a.tape._record(a.value.sum(axis=axis), (a,), pullback)


def mean(a, axis=None):
    n = a.value.size if axis is None else a.shape[axis]
    return scale(total(a, axis), 1.0 / n)


def frob_sq(a, axis=None):
    """Sum of squares over all entries, or over the last two axes when ``axis='matrix'``."""
    v = a.value
    if axis == "matrix":
        out = np.sum(v * v, axis=(-2, -1))
        return a.tape._record(out, (a,), lambda g: (2.0 * v * g[..., None, None],))
    return a.tape._record(np.asarray(np.sum(v * v)), (a,), lambda g: (2.0 * v * g,))


def inv(a):
    """Batched matrix inverse; raises NumericError on singular input."""
    try:
        x = np.linalg.inv(a.value)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular matrix in inv: {exc}") from exc
    xt = _swap(x)
    return a.tape._record(x, (a,), lambda g: (-(xt @ g @ xt),))


def backward(tape, loss):
    """Reverse sweep from a scalar ``loss``.

    Returns a dict mapping each parameter leaf to its gradient (zeros for leaves
    the loss does not depend on). Gradients are also left on ``node.grad``.
    """
    if loss.value.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    for node in tape.nodes:
        node.grad = None
    if not loss.requires_grad:
        return {n: np.zeros_like(n.value) for n in tape.nodes if n.pullback is None}
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None or node.pullback is None:
            continue
        for parent, pg in zip(node.parents, node.pullback(g)):
            if not parent.requires_grad:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg
    return {
        n: (np.zeros_like(n.value) if n.grad is None else np.asarray(n.grad, dtype=float).reshape(n.shape))
        for n in tape.nodes
        if n.pullback is None
    }


def skew_index(n):
    """Row-major strict upper-triangle indices used to pack skew parameters."""
    return np.triu_indices(n, k=1)


def skew_from_params(params, n):
    """Skew-symmetric ``A`` with ``A[i, j] = p_k`` and ``A[j, i] = -p_k`` for i < j.

    Works on a Node holding ``(..., n(n-1)/2)``; differentiable.
    """
    iu, ju = skew_index(n)
    k = len(iu)
    pack = np.zeros((k, n * n))
    pack[np.arange(k), iu * n + ju] = 1.0
    pack[np.arange(k), ju * n + iu] = -1.0
    flat = params @ pack if params.ndim >= 2 else reshape(reshape(params, (1, k)) @ pack, (n * n,))
    return reshape(flat, params.shape[:-1] + (n, n))


def cayley(params, n):
    """Orthonormal ``Q = (I - A)(I + A)^-1`` from packed skew parameters.

    ``params`` may be a Node (differentiable) or an array of shape
    ``(..., n(n-1)/2)``; arrays give an array back.
    """
    if not isinstance(params, Node):
        tape = Tape()
        return cayley(tape.const(np.asarray(params, dtype=float)), n).value
    if params.shape[-1] != n * (n - 1) // 2:
        raise UsageError(f"expected {n * (n - 1) // 2} skew parameters for n={n}, got {params.shape[-1]}")
    if n == 1:
        return params.tape.const(np.ones(params.shape[:-1] + (1, 1)))
    iu, ju = skew_index(n)
    p = params.value
    a = np.zeros(p.shape[:-1] + (n, n))
    a[..., iu, ju] = p
    a[..., ju, iu] = -p
    eye = np.eye(n)
    # (I - A)(I + A)^-1 = (2I - (I + A))(I + A)^-1 = 2 (I + A)^-1 - I
    try:
        w = np.linalg.inv(eye + a)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"I + A is singular in cayley: {exc}") from exc
    q = 2.0 * w - eye
    wt = _swap(w)

    def pullback(g):
        ga = -2.0 * (wt @ g @ wt)
        return (ga[..., iu, ju] - ga[..., ju, iu],)

    return params.tape._record(q, (params,), pullback)


def _shifted_value(fn, params, i, idx, step):
    shifted = [q.copy() for q in params]
    shifted[i][idx] += step
    t = Tape()
    return float(fn(t, *[t.param(q) for q in shifted]).value)


def finite_diff_check(fn, params, h=1e-5, order=2):
    """Max relative error between tape gradients and central differences.

    ``fn(tape, *nodes)`` must return a scalar Node; ``params`` is a list of arrays.
    The relative error per coordinate uses ``max(|analytic|, |numeric|, 1e-8)``.
    ``order=4`` uses the five-point stencil, whose O(h^4) truncation error allows a
    larger ``h`` and so less roundoff on coordinates with tiny gradients.
    Symmetric pairs are differenced before weighting so a flat coordinate gives
    exactly zero.
    """
    # (offset, integer weight) pairs and the common divisor
    if order == 2:
        pairs, divisor = ((1.0, 1.0),), 2.0
    elif order == 4:
        pairs, divisor = ((1.0, 8.0), (2.0, -1.0)), 12.0
    else:
        raise UsageError(f"order must be 2 or 4, got {order}")
    params = [np.array(p, dtype=float) for p in params]
    tape = Tape()
    nodes = [tape.param(p) for p in params]
    grads = backward(tape, fn(tape, *nodes))
    worst = 0.0
    for i, p in enumerate(params):
        analytic = grads[nodes[i]]
        for idx in np.ndindex(p.shape):
            numeric = 0.0
            for offset, weight in pairs:
                numeric += weight * (_shifted_value(fn, params, i, idx, offset * h)
                                     - _shifted_value(fn, params, i, idx, -offset * h))
            numeric /= divisor * h
            denom = max(abs(analytic[idx]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[idx] - numeric) / denom)
    return worst
