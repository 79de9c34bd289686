"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Only the operations needed by the filter rollout and the losses are provided.
A :class:`Tape` records every :class:`Var` created through it; ``backward``
walks the records in reverse creation order, so no topological sort is needed.

Example::

    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    y = (x * x).sum()
    grads = tape.backward(y)
    grads[x]  # -> array([2., 4.])
"""
import numpy as np


class Var:
    __slots__ = ("value", "tape", "index", "parents", "vjp")

    __array_priority__ = 100.0

    def __init__(self, value, tape, parents=(), vjp=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Tape:
    def __init__(self):
        self.nodes = []

    def leaf(self, value):
        return Var(np.asarray(value, dtype=np.float64), self)

    def backward(self, out, seed=None):
        """Return a dict-like mapping ``Var -> gradient`` of ``out``."""
        if seed is None:
            seed = np.ones_like(out.value)
        grads = {out.index: np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes[: out.index + 1]):
            if not node.parents:
                continue
            g = grads.pop(node.index, None)
            if g is None:
                continue
            for p, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not isinstance(p, Var):
                    continue
                prev = grads.get(p.index)
                grads[p.index] = pg if prev is None else prev + pg
        return Gradients(grads)


class Gradients:
    def __init__(self, by_index):
        self._g = by_index

    def __getitem__(self, var):
        g = self._g.get(var.index)
        if g is None:
            return np.zeros_like(var.value)
        return g

    def get(self, var, default=None):
        return self._g.get(var.index, default)


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(tape, val, parents, vjp):
    if tape is None:
        return val
    return Var(val, tape, parents, vjp)


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    return _make(_tape_of(a, b), out, (a, b),
                 lambda g: (unbroadcast(g, np.shape(av)), unbroadcast(g, np.shape(bv))))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    return _make(_tape_of(a, b), out, (a, b),
                 lambda g: (unbroadcast(g, np.shape(av)), unbroadcast(-g, np.shape(bv))))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    return _make(_tape_of(a, b), out, (a, b),
                 lambda g: (unbroadcast(g * bv, np.shape(av)), unbroadcast(g * av, np.shape(bv))))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _make(_tape_of(a, b), out, (a, b),
                 lambda g: (unbroadcast(g / bv, np.shape(av)),
                            unbroadcast(-g * out / bv, np.shape(bv))))


def matmul(a, b):
    av, bv = value(a), value(b)
    out = av @ bv

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.multiply.outer(g, bv)
        gb = np.swapaxes(av, -1, -2) @ g if av.ndim > 1 else np.multiply.outer(av, g)
        return unbroadcast(ga, av.shape), unbroadcast(gb, bv.shape)

    return _make(_tape_of(a, b), out, (a, b), vjp)


def square(a):
    av = value(a)
    return _make(_tape_of(a), av * av, (a,), lambda g: (2.0 * av * g,))


def sqrt(a):
    av = value(a)
    out = np.sqrt(av)
    return _make(_tape_of(a), out, (a,), lambda g: (0.5 * g / out,))


def exp(a):
    out = np.exp(value(a))
    return _make(_tape_of(a), out, (a,), lambda g: (g * out,))


def log(a):
    av = value(a)
    return _make(_tape_of(a), np.log(av), (a,), lambda g: (g / av,))


def softplus(a):
    av = value(a)
    out = np.logaddexp(0.0, av)
    return _make(_tape_of(a), out, (a,), lambda g: (g * _sigmoid(av),))


def arctan(a):
    av = value(a)
    return _make(_tape_of(a), np.arctan(av), (a,), lambda g: (g / (1.0 + av * av),))


def maximum(a, b):
    av, bv = value(a), value(b)
    pick_a = av >= bv
    out = np.where(pick_a, av, bv)
    return _make(_tape_of(a, b), out, (a, b),
                 lambda g: (unbroadcast(np.where(pick_a, g, 0.0), np.shape(av)),
                            unbroadcast(np.where(pick_a, 0.0, g), np.shape(bv))))


def minimum(a, b):
    av, bv = value(a), value(b)
    pick_a = av <= bv
    out = np.where(pick_a, av, bv)
    return _make(_tape_of(a, b), out, (a, b),
                 lambda g: (unbroadcast(np.where(pick_a, g, 0.0), np.shape(av)),
                            unbroadcast(np.where(pick_a, 0.0, g), np.shape(bv))))


def where(mask, a, b):
    """Select elementwise; ``mask`` is a constant boolean array."""
    av, bv = value(a), value(b)
    out = np.where(mask, av, bv)
    return _make(_tape_of(a, b), out, (a, b),
                 lambda g: (unbroadcast(np.where(mask, g, 0.0), np.shape(av)),
                            unbroadcast(np.where(mask, 0.0, g), np.shape(bv))))


def vsum(a, axis=None, keepdims=False):
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _make(_tape_of(a), out, (a,), vjp)


def reshape(a, shape):
    av = value(a)
    return _make(_tape_of(a), av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def swapaxes(a, i, j):
    return _make(_tape_of(a), np.swapaxes(value(a), i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a, idx):
    av = value(a)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return (out,)

    return _make(_tape_of(a), av[idx], (a,), vjp)


def stack(items, axis=0):
    vals = [value(x) for x in items]
    out = np.stack(vals, axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _make(_tape_of(*items), out, tuple(items), vjp)


def concatenate(items, axis=-1):
    vals = [value(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(_tape_of(*items), out, tuple(items), vjp)


def solve(A, B):
    """Batched ``A^-1 B``."""
    Av, Bv = value(A), value(B)
    X = np.linalg.solve(Av, Bv)

    def vjp(g):
        gB = np.linalg.solve(np.swapaxes(Av, -1, -2), g)
        gA = -gB @ np.swapaxes(X, -1, -2)
        return unbroadcast(gA, Av.shape), unbroadcast(gB, Bv.shape)

    return _make(_tape_of(A, B), X, (A, B), vjp)


def diag_embed(v):
    vv = value(v)
    n = vv.shape[-1]
    idx = np.arange(n)
    out = np.zeros(vv.shape + (n,))
    out[..., idx, idx] = vv
    return _make(_tape_of(v), out, (v,), lambda g: (g[..., idx, idx].copy(),))


def custom(inputs, out_value, vjp):
    """Record an op whose vector-Jacobian product is supplied by the caller."""
    return _make(_tape_of(*inputs), out_value, tuple(inputs), vjp)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))
