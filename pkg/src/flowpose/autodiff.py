"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every function here accepts either plain numpy arrays or ``Node`` objects and
returns the matching kind, so numerical code can be written once and run both
with and without gradient tracking. Rank is limited to <= 2 for matmul; the
elementwise ops follow numpy broadcasting and un-broadcast their adjoints.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

__all__ = [
    "Node", "CheckedMode", "as_array", "leaf", "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "tanh", "exp", "log",
    "sin", "cos", "atan2", "acos", "softmax", "reduce_sum", "mean", "dot",
    "cross", "l2norm", "concat", "take", "reshape", "transpose", "absolute",
    "sqrt", "normal_cdf", "normal_pdf", "special_orthogonalize_op",
    "solve_node", "finite_diff_check",
    "NotSPDError", "ShapeError", "DomainError",
]

_CHECK_FINITE = False


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NotSPDError(ValueError):
    pass


class CheckedMode:
    """Context manager: every op output is checked for NaN/Inf."""

    def __enter__(self):
        global _CHECK_FINITE
        self._prev = _CHECK_FINITE
        _CHECK_FINITE = True
        return self

    def __exit__(self, *exc):
        global _CHECK_FINITE
        _CHECK_FINITE = self._prev
        return False


def _finite_check(value):
    if _CHECK_FINITE and not np.all(np.isfinite(value)):
        raise DomainError("non-finite value produced on tape")


class Node:
    """One tape entry: a value plus vector-Jacobian closures to its parents."""

    __slots__ = ("value", "parents", "vjps", "grad")

    # make numpy defer mixed ndarray-Node arithmetic to our reflected ops
    # instead of broadcasting into an object array
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        _finite_check(self.value)
        self.parents = parents
        self.vjps = vjps
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape})"

    # arithmetic sugar; keeps flow code readable
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return take(self, idx)


def leaf(value):
    """A trainable/input leaf holding a float64 copy of ``value``."""
    return Node(np.array(value, dtype=np.float64))


def as_array(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _is_node(*xs):
    return any(isinstance(x, Node) for x in xs)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _make(value, parents, vjps):
    return Node(value, tuple(parents), tuple(vjps))


def _binary(x, y, fwd, vjp_x, vjp_y):
    if not _is_node(x, y):
        return fwd(np.asarray(x, float), np.asarray(y, float))
    xn = x if isinstance(x, Node) else leaf(x)
    yn = y if isinstance(y, Node) else leaf(y)
    out = fwd(xn.value, yn.value)
    return _make(
        out,
        (xn, yn),
        (
            lambda g: _unbroadcast(vjp_x(g, xn.value, yn.value, out), xn.value.shape),
            lambda g: _unbroadcast(vjp_y(g, xn.value, yn.value, out), yn.value.shape),
        ),
    )


def _unary(x, fwd, vjp):
    if not isinstance(x, Node):
        return fwd(np.asarray(x, float))
    out = fwd(x.value)
    return _make(out, (x,), (lambda g: vjp(g, x.value, out),))


def add(x, y):
    return _binary(x, y, np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)


def sub(x, y):
    return _binary(x, y, np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g)


def mul(x, y):
    return _binary(x, y, np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)


def div(x, y):
    return _binary(
        x, y, np.divide,
        lambda g, a, b, o: g / b,
        lambda g, a, b, o: -g * a / (b * b),
    )


def neg(x):
    return _unary(x, np.negative, lambda g, a, o: -g)


def matmul(x, y):
    def fwd(a, b):
        if a.ndim > 2 or b.ndim > 2:
            raise ShapeError("matmul supports rank <= 2 only")
        return a @ b

    def vjp_x(g, a, b, o):
        if b.ndim == 1:
            return np.outer(g, b) if a.ndim == 2 else g * b
        return (g @ b.T) if a.ndim == 2 else b @ g

    def vjp_y(g, a, b, o):
        if a.ndim == 1:
            return np.outer(a, g) if b.ndim == 2 else g * a
        return a.T @ g

    return _binary(x, y, fwd, vjp_x, vjp_y)


def tanh(x):
    return _unary(x, np.tanh, lambda g, a, o: g * (1.0 - o * o))


def exp(x):
    return _unary(x, np.exp, lambda g, a, o: g * o)


def log(x):
    def fwd(a):
        if np.any(a <= 0):
            raise DomainError("log of non-positive value")
        return np.log(a)

    return _unary(x, fwd, lambda g, a, o: g / a)


def sqrt(x):
    def fwd(a):
        if np.any(a < 0):
            raise DomainError("sqrt of negative value")
        return np.sqrt(a)

    return _unary(x, fwd, lambda g, a, o: g / (2.0 * o))


def sin(x):
    return _unary(x, np.sin, lambda g, a, o: g * np.cos(a))


def cos(x):
    return _unary(x, np.cos, lambda g, a, o: -g * np.sin(a))


def absolute(x):
    return _unary(x, np.abs, lambda g, a, o: g * np.sign(a))


def atan2(y, x):
    return _binary(
        y, x, np.arctan2,
        lambda g, a, b, o: g * b / (a * a + b * b),
        lambda g, a, b, o: -g * a / (a * a + b * b),
    )


def acos(x):
    def fwd(a):
        if np.any(np.abs(a) > 1.0):
            raise DomainError("acos argument outside [-1, 1]")
        return np.arccos(a)

    return _unary(x, fwd, lambda g, a, o: -g / np.sqrt(np.maximum(1.0 - a * a, 1e-300)))


def clip(x, lo, hi):
    """Clamp with pass-through gradient strictly inside the interval."""

    def vjp(g, a, o):
        return g * ((a > lo) & (a < hi))

    return _unary(x, lambda a: np.clip(a, lo, hi), vjp)


def normal_cdf(x):
    return _unary(x, ndtr, lambda g, a, o: g * np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi))


def normal_pdf(x):
    def fwd(a):
        return np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi)

    return _unary(x, fwd, lambda g, a, o: -g * a * o)


def softmax(x, axis=-1):
    def fwd(a):
        m = a - a.max(axis=axis, keepdims=True)
        e = np.exp(m)
        return e / e.sum(axis=axis, keepdims=True)

    def vjp(g, a, o):
        return o * (g - (g * o).sum(axis=axis, keepdims=True))

    return _unary(x, fwd, vjp)


def reduce_sum(x, axis=None, keepdims=False):
    def fwd(a):
        return a.sum(axis=axis, keepdims=keepdims)

    def vjp(g, a, o):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return _unary(x, fwd, vjp)


def mean(x, axis=None, keepdims=False):
    a = as_array(x)
    n = a.size if axis is None else a.shape[axis]
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def dot(x, y):
    return reduce_sum(mul(x, y))


def cross(x, y):
    """Cross product along the last axis (size 3)."""
    return _binary(
        x, y,
        lambda a, b: np.cross(a, b),
        lambda g, a, b, o: np.cross(b, g),
        lambda g, a, b, o: np.cross(g, a),
    )


def l2norm(x, axis=-1, keepdims=False):
    def fwd(a):
        n = np.sqrt((a * a).sum(axis=axis, keepdims=keepdims))
        if np.any(n == 0):
            raise DomainError("l2norm of zero vector")
        return n

    def vjp(g, a, o):
        n = o if keepdims else np.expand_dims(o, axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        return gg * a / n

    return _unary(x, fwd, vjp)


def concat(xs, axis=-1):
    if not any(isinstance(x, Node) for x in xs):
        return np.concatenate([np.asarray(x, float) for x in xs], axis=axis)
    nodes = [x if isinstance(x, Node) else leaf(x) for x in xs]
    values = [n.value for n in nodes]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]

        return vjp

    return _make(out, nodes, tuple(make_vjp(i) for i in range(len(nodes))))


def take(x, idx):
    """Basic slicing/indexing (no repeated fancy indices)."""

    def fwd(a):
        return a[idx]

    def vjp(g, a, o):
        out = np.zeros_like(a)
        out[idx] = g
        return out

    return _unary(x, fwd, vjp)


def reshape(x, shape):
    def vjp(g, a, o):
        return g.reshape(a.shape)

    return _unary(x, lambda a: a.reshape(shape), vjp)


def transpose(x):
    return _unary(x, lambda a: a.T, lambda g, a, o: g.T)


def _special_orthogonalize_value(m):
    u, s, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _special_orthogonalize_vjp(m, q, gbar):
    """Adjoint of the nearest-rotation projection via the polar-factor ODE.

    M = Q H with H = Q^T M symmetric; a perturbation dM gives dQ = Q @ Omega
    where Omega is the skew solution of Omega H + H Omega = skew(Q^T dM).
    The 9x9 Jacobian is assembled column by column (cheap at 3x3).
    """
    h = q.T @ m
    d_eig, v_eig = np.linalg.eigh(0.5 * (h + h.T))
    denom = d_eig[:, None] + d_eig[None, :]
    jac = np.empty((9, 9))
    for j in range(9):
        dm = np.zeros(9)
        dm[j] = 1.0
        a = q.T @ dm.reshape(3, 3)
        at = v_eig.T @ (a - a.T) @ v_eig
        omega_t = np.where(np.abs(denom) > 1e-12, at / np.where(denom == 0, 1.0, denom), 0.0)
        dq = q @ (v_eig @ omega_t @ v_eig.T)
        jac[:, j] = dq.ravel()
    return (jac.T @ gbar.ravel()).reshape(3, 3)


def special_orthogonalize_op(x):
    """Project 3x3 matrices onto SO(3). Accepts (3,3) or a batch (B,9)."""

    def fwd(a):
        if a.shape == (3, 3):
            return _special_orthogonalize_value(a)
        out = np.empty_like(a)
        for i in range(a.shape[0]):
            out[i] = _special_orthogonalize_value(a[i].reshape(3, 3)).ravel()
        return out

    def vjp(g, a, o):
        if a.shape == (3, 3):
            return _special_orthogonalize_vjp(a, o, g)
        out = np.empty_like(a)
        for i in range(a.shape[0]):
            out[i] = _special_orthogonalize_vjp(
                a[i].reshape(3, 3), o[i].reshape(3, 3), g[i].reshape(3, 3)
            ).ravel()
        return out

    return _unary(x, fwd, vjp)


def solve_node(a, b):
    """Solve A x = b for SPD A, with the standard closed-form adjoint."""

    av, bv = as_array(a), as_array(b)
    if not np.allclose(av, av.T, atol=1e-10):
        raise NotSPDError("matrix is not symmetric")
    try:
        np.linalg.cholesky(av)
    except np.linalg.LinAlgError as e:
        raise NotSPDError("matrix is not positive definite") from e
    x = np.linalg.solve(av, bv)
    if not _is_node(a, b):
        return x
    an = a if isinstance(a, Node) else leaf(a)
    bn = b if isinstance(b, Node) else leaf(b)

    def vjp_a(g):
        gb = np.linalg.solve(av.T, g)
        return -np.outer(gb, x)

    def vjp_b(g):
        return np.linalg.solve(av.T, g)

    return _make(x, (an, bn), (vjp_a, vjp_b))


def backward(output):
    """Accumulate gradients of a scalar ``output`` into every reachable node."""
    if output.value.size != 1:
        raise ShapeError("backward requires a scalar output")
    # iterative topological order over parents
    order = []
    seen = set()
    stack = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in order:
        node.grad = None
    output.grad = np.ones_like(output.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            g = vjp(node.grad)
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + g
    return output.grad


def grad(f, leaves):
    """Gradients of the scalar ``f()`` w.r.t. ``leaves`` (list of Nodes)."""
    out = f()
    backward(out)
    return [np.zeros_like(l.value) if l.grad is None else l.grad for l in leaves]


def finite_diff_check(f, leaves, step=1e-6):
    """Max relative discrepancy between tape gradients of ``f`` and central
    finite differences over every entry of ``leaves``.

    ``f`` is re-evaluated after each perturbation of the leaf values, so it
    must read the leaves' current ``.value``.
    """
    grads = grad(f, leaves)
    worst = 0.0
    for node, g in zip(leaves, grads):
        flat = node.value.ravel()
        gflat = np.asarray(g).ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(as_array(f()))
            flat[i] = orig - step
            fm = float(as_array(f()))
            flat[i] = orig
            fd = (fp - fm) / (2.0 * step)
            denom = max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(gflat[i] - fd) / denom)
    return worst
