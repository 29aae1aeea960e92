"""A small array-level reverse-mode autodiff engine.

``Var`` wraps an ndarray and records how it was produced.  Only the
operations defined in this module have adjoints; anything else applied to a
``Var`` (a stray ``np.exp``, an implicit array conversion) raises
:class:`UnregisteredOpError` instead of silently dropping the gradient.

The module mirrors the function names of :mod:`gdnstream.numerics`
(``matmul``, ``softmax_rows``, ``l2norm_rows``, ``rope``, ``sigmoid``,
``tanh``, ``concat``), so model code written against an ``ops`` argument
runs unchanged on either.  Forward values are computed by the numerics
kernels themselves, which keeps the two paths bit-identical.
"""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics


class UnregisteredOpError(TypeError):
    """An operation without a registered adjoint touched a Var."""


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    __slots__ = ("value", "grad", "parents", "name")

    def __init__(self, value, parents: Sequence[Tuple["Var", Callable]] = (),
                 name: Optional[str] = None):
        self.value = np.asarray(value)
        self.grad: Optional[np.ndarray] = None
        # (parent, fn mapping this node's gradient to the parent's contribution)
        self.parents = tuple(parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape})"

    def __array__(self, *args, **kwargs):
        raise UnregisteredOpError("implicit array conversion of a Var would detach its gradient")

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        fn = _UFUNCS.get(ufunc)
        if fn is None or method != "__call__" or kwargs:
            raise UnregisteredOpError(f"no adjoint registered for numpy.{ufunc.__name__}")
        return fn(*inputs)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise UnregisteredOpError("division by a Var is not registered")
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        raise UnregisteredOpError("division by a Var is not registered")

    # shape ----------------------------------------------------------------
    def reshape(self, shape):
        orig = self.shape
        return Var(self.value.reshape(shape), [(self, lambda g: g.reshape(orig))])

    def transpose(self, axes):
        inv = np.argsort(axes)
        return Var(self.value.transpose(axes), [(self, lambda g: g.transpose(inv))])

    def __getitem__(self, idx):
        shape, dtype = self.shape, self.value.dtype

        def back(g):
            out = np.zeros(shape, dtype=dtype)
            np.add.at(out, idx, g)
            return out
        return Var(self.value[idx], [(self, back)])


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def _parents(*pairs):
    return [(p, fn) for p, fn in pairs if isinstance(p, Var)]


def constant(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


# ---------------------------------------------------------------------------
# registered operations

def add(a, b):
    av, bv = _val(a), _val(b)
    return Var(av + bv, _parents((a, lambda g: _unbroadcast(g, av.shape)),
                                 (b, lambda g: _unbroadcast(g, bv.shape))))


def neg(a):
    return Var(-_val(a), _parents((a, lambda g: -g)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    return Var(av * bv, _parents((a, lambda g: _unbroadcast(g * bv, av.shape)),
                                 (b, lambda g: _unbroadcast(g * av, bv.shape))))


def matmul(a, b):
    av, bv = _val(a), _val(b)
    out = numerics.matmul(av, bv)
    return Var(out, _parents(
        (a, lambda g: _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)),
        (b, lambda g: _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape))))


def softmax_rows(x, mask=None):
    y = numerics.softmax_rows(_val(x), mask)
    return Var(y, _parents((x, lambda g: y * (g - np.sum(g * y, axis=-1, keepdims=True)))))


def l2norm_rows(x, eps: float = numerics.EPS_NORM):
    xv = _val(x)
    y = numerics.l2norm_rows(xv, eps)
    norm = numerics.row_norms(xv)
    live = norm >= eps

    def back(g):
        safe = np.where(live, norm, 1.0)
        gx = (g - y * np.sum(g * y, axis=-1, keepdims=True)) / safe
        return np.where(live, gx, 0.0)
    return Var(y, _parents((x, back)))


def rope(x, positions, base: float = numerics.ROPE_BASE):
    y = numerics.rope(_val(x), positions, base)
    return Var(y, _parents((x, lambda g: numerics.rope(g, positions, base, inverse=True))))


def sigmoid(x):
    y = numerics.sigmoid(_val(x))
    return Var(y, _parents((x, lambda g: g * y * (1.0 - y))))


def tanh(x):
    y = numerics.tanh(_val(x))
    return Var(y, _parents((x, lambda g: g * (1.0 - y * y))))


def concat(parts: Sequence, axis: int = 0):
    vals = [_val(p) for p in parts]
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def piece(i):
        return lambda g: np.split(g, bounds, axis=axis)[i]
    return Var(np.concatenate(vals, axis=axis),
               _parents(*[(p, piece(i)) for i, p in enumerate(parts)]))


def sum_all(x):
    xv = _val(x)
    return Var(np.sum(xv), _parents((x, lambda g: np.broadcast_to(g, xv.shape).copy())))


def gdn_update(S, k, v, alpha, beta):
    """Sequential delta-rule recurrence with a hand-written adjoint.

    Shapes as in :func:`gdnstream.gdn.delta_rule_sequential` without batch
    axes: S (H, D, D), k/v (L, H, D), alpha/beta (L, H).
    """
    Sv, kv, vv, av, bv = (_val(t) for t in (S, k, v, alpha, beta))
    L = kv.shape[0]
    states = [Sv]
    resids = []
    cur = Sv
    for j in range(L):
        r = vv[j] - np.matmul(kv[j][:, None, :], cur)[:, 0, :]
        cur = av[j][:, None, None] * cur + bv[j][:, None, None] * (kv[j][:, :, None] * r[:, None, :])
        resids.append(r)
        states.append(cur)

    cache = {}

    def adjoints(g):
        if cache.get("g") is g:
            return cache
        dk = np.zeros_like(kv)
        dv = np.zeros_like(vv)
        da = np.zeros_like(av)
        db = np.zeros_like(bv)
        G = g
        for j in reversed(range(L)):
            prev, kj, r = states[j], kv[j], resids[j]
            da[j] = np.sum(G * prev, axis=(-2, -1))
            Gr = np.matmul(G, r[:, :, None])[:, :, 0]           # G r^T
            db[j] = np.sum(kj * Gr, axis=-1)
            dr = bv[j][:, None] * np.matmul(kj[:, None, :], G)[:, 0, :]
            dv[j] = dr
            dk[j] = bv[j][:, None] * Gr - np.matmul(prev, dr[:, :, None])[:, :, 0]
            G = av[j][:, None, None] * G - kj[:, :, None] * dr[:, None, :]
        cache.update(g=g, S=G, k=dk, v=dv, alpha=da, beta=db)
        return cache

    return Var(cur, _parents((S, lambda g: adjoints(g)["S"]),
                             (k, lambda g: adjoints(g)["k"]),
                             (v, lambda g: adjoints(g)["v"]),
                             (alpha, lambda g: adjoints(g)["alpha"]),
                             (beta, lambda g: adjoints(g)["beta"])))


_UFUNCS = {
    np.add: add,
    np.subtract: lambda a, b: add(a, neg(b)),
    np.multiply: mul,
    np.negative: neg,
    np.matmul: matmul,
    np.tanh: tanh,
}


# ---------------------------------------------------------------------------
# backward pass

def _topo_order(root: Var) -> List[Var]:
    order: List[Var] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Var) -> None:
    """Fill ``.grad`` on every node reachable from a scalar ``root``."""
    if root.value.size != 1:
        raise ValueError("backward() needs a scalar output")
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, fn in node.parents:
            contrib = fn(node.grad)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib

