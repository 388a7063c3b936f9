"""A small array-valued reverse-mode differentiation tape.

Nodes hold numpy arrays. Every operation appends its result to the tape of
its inputs together with a vector-Jacobian closure; :meth:`Tape.backward`
replays the tape in reverse. Only the operations the light-field pipeline
needs are provided.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_relu_log: list | None = None


@contextmanager
def record_relu_masks():
    """Collect the on/off mask of every ReLU evaluated inside the block.

    Used by gradient checks: a central difference whose two evaluations see
    different masks straddles a kink and is not a valid derivative estimate.
    """
    global _relu_log
    prev, _relu_log = _relu_log, []
    try:
        yield _relu_log
    finally:
        _relu_log = prev


class Var:
    __slots__ = ("value", "grad", "parents", "vjp", "tape", "name")

    def __init__(self, value, tape=None, parents=(), vjp=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.tape = tape
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def __repr__(self):
        return f"Var(shape={self.shape}, name={self.name!r})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []

    def var(self, value, name=None) -> Var:
        """A leaf whose gradient is wanted."""
        return Var(value, tape=self, name=name)

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Var) -> None:
        if loss.tape is None:
            # detached: nothing depends on a leaf
            return
        if loss.value.size != 1:
            raise ValueError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            grads = node.vjp(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not isinstance(parent, Var) or parent.tape is None:
                    continue
                g = _unbroadcast(g, parent.shape)
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
            if node.parents:
                # interior gradients are no longer needed
                node.grad = None


def _value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return None


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _node(value, parents, vjp):
    tape = _tape_of(*parents)
    tracked = tape is not None  # an empty tape is falsy (len 0)
    out = Var(value, tape=tape, parents=parents if tracked else (), vjp=vjp if tracked else None)
    if tape is not None:
        tape.nodes.append(out)
    return out


def constant(value, name=None) -> Var:
    return Var(value, name=name)


def add(a, b):
    return _node(_value(a) + _value(b), (a, b), lambda g: (g, g))


def sub(a, b):
    return _node(_value(a) - _value(b), (a, b), lambda g: (g, -g))


def mul(a, b):
    av, bv = _value(a), _value(b)
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    av, bv = _value(a), _value(b)
    out = av / bv
    return _node(out, (a, b), lambda g: (g / bv, -g * out / bv))


def matmul(a, b):
    av, bv = _value(a), _value(b)

    def vjp(g):
        if av.ndim == 1:
            ga = g @ bv.T if bv.ndim == 2 else g * bv
        else:
            ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.multiply.outer(g, bv)
        if bv.ndim == 1:
            gb = np.tensordot(g, av, axes=(range(g.ndim), range(g.ndim))) if av.ndim > 1 else g * av
        elif av.ndim == 1:
            gb = np.outer(av, g)
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _node(av @ bv, (a, b), vjp)


def sum_(a, axis=None, keepdims=False):
    av = _value(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return _node(av.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def exp(a):
    out = np.exp(_value(a))
    return _node(out, (a,), lambda g: (g * out,))


def sin(a):
    av = _value(a)
    return _node(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    av = _value(a)
    return _node(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def sqrt(a):
    out = np.sqrt(_value(a))
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def square(a):
    av = _value(a)
    return _node(av * av, (a,), lambda g: (2.0 * g * av,))


def relu(a):
    av = _value(a)
    on = av > 0
    if _relu_log is not None:
        _relu_log.append(on)
    return _node(np.where(on, av, 0.0), (a,), lambda g: (g * on,))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-_value(a)))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis=-1):
    av = _value(a)
    e = np.exp(av - av.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), vjp)


def reshape(a, *shape):
    av = _value(a)
    return _node(av.reshape(*shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes=None):
    av = _value(a)
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(av, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index):
    av = _value(a)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, index, g)
        return (out,)

    return _node(av[index], (a,), vjp)


def take_rows(a, index):
    """``a[index]`` for an integer index array into the first axis."""
    av = _value(a)
    index = np.asarray(index)

    def vjp(g):
        out = np.zeros_like(av)
        flat = g.reshape(-1, *av.shape[1:])
        np.add.at(out, index.reshape(-1), flat)
        return (out,)

    return _node(av[index], (a,), vjp)


def concat(xs, axis=-1):
    vals = [_value(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate(vals, axis=axis), tuple(xs), vjp)


def stack(xs, axis=0):
    vals = [_value(x) for x in xs]

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(np.stack(vals, axis=axis), tuple(xs), vjp)


def custom(value, parents, vjp):
    """Record a node with a hand-written vector-Jacobian product."""
    return _node(value, tuple(parents), vjp)
