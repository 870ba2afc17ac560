"""Minimal reverse-mode automatic differentiation over numpy arrays.

A `Tape` records each operation with a closure computing vector-Jacobian
products; `Tape.gradients` replays the records backwards. Passing
``tape=None`` to any op skips recording, so the same forward code serves
both inference and training. All values are float64.

Only the operations the video encoder needs are implemented. Each op's
VJP is verified against central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np


class Var:
    """An array value tracked on (at most) one tape."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Append-only record of operations in execution order."""

    def __init__(self):
        self._records: list[tuple[Var, tuple[Var, ...], object]] = []

    def record(self, out: Var, parents: tuple[Var, ...], vjp) -> None:
        self._records.append((out, parents, vjp))

    def gradients(self, output: Var, wrt: list[Var]) -> list[np.ndarray]:
        """Gradients of the scalar `output` with respect to each Var in `wrt`.

        Vars the output does not depend on get zero gradients.
        """
        if output.value.ndim != 0:
            raise ValueError("gradients are defined for scalar outputs only")
        grads: dict[int, np.ndarray] = {id(output): np.ones(())}
        for out, parents, vjp in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        return [grads.get(id(v), np.zeros_like(v.value)) for v in wrt]


def constant(value) -> Var:
    """A leaf Var; also how parameters enter a tape."""
    return Var(value)


def _op(tape: Tape | None, value, parents, vjp) -> Var:
    out = Var(value)
    if tape is not None:
        tape.record(out, parents, vjp)
    return out


def matmul(tape, a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return _op(tape, av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def vecmat(tape, v: Var, m: Var) -> Var:
    """(N,) @ (N, M) -> (M,)."""
    vv, mv = v.value, m.value
    return _op(tape, vv @ mv, (v, m), lambda g: (mv @ g, np.outer(vv, g)))


def matvec(tape, m: Var, v: Var) -> Var:
    """(N, M) @ (M,) -> (N,)."""
    mv, vv = m.value, v.value
    return _op(tape, mv @ vv, (m, v), lambda g: (np.outer(g, vv), mv.T @ g))


def bmm(tape, a: Var, b: Var) -> Var:
    """Batched matmul: (F, P, C) @ (F, C, Q) -> (F, P, Q)."""
    av, bv = a.value, b.value

    def vjp(g):
        return (g @ bv.swapaxes(-1, -2), av.swapaxes(-1, -2) @ g)

    return _op(tape, av @ bv, (a, b), vjp)


def transpose_last2(tape, x: Var) -> Var:
    return _op(
        tape,
        x.value.swapaxes(-1, -2),
        (x,),
        lambda g: (g.swapaxes(-1, -2),),
    )


def reshape(tape, x: Var, shape) -> Var:
    old = x.value.shape
    return _op(tape, x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def slice_axis0(tape, x: Var, start: int, stop: int) -> Var:
    xv = x.value

    def vjp(g):
        z = np.zeros_like(xv)
        z[start:stop] = g
        return (z,)

    return _op(tape, xv[start:stop], (x,), vjp)


def pad_axis0(tape, x: Var, before: int, after: int) -> Var:
    xv = x.value
    pad = [(before, after)] + [(0, 0)] * (xv.ndim - 1)
    n = xv.shape[0]
    return _op(
        tape,
        np.pad(xv, pad),
        (x,),
        lambda g: (g[before : before + n],),
    )


def concat(tape, xs: list[Var], axis: int) -> Var:
    values = [x.value for x in xs]
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _op(tape, np.concatenate(values, axis=axis), tuple(xs), vjp)


def add_row(tape, x: Var, b: Var) -> Var:
    """Broadcast-add a (M,) bias to the last axis of x."""
    axes = tuple(range(x.value.ndim - 1))
    return _op(
        tape,
        x.value + b.value,
        (x, b),
        lambda g: (g, g.sum(axis=axes)),
    )


def add(tape, a: Var, b: Var) -> Var:
    """Same-shape addition."""
    return _op(tape, a.value + b.value, (a, b), lambda g: (g, g))


def sub(tape, a: Var, b: Var) -> Var:
    return _op(tape, a.value - b.value, (a, b), lambda g: (g, -g))


def mul(tape, a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return _op(tape, av * bv, (a, b), lambda g: (g * bv, g * av))


def div(tape, a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    return _op(tape, av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def add_scalar(tape, x: Var, s: Var) -> Var:
    """Add a 0-d Var to every element of x."""
    return _op(tape, x.value + s.value, (x, s), lambda g: (g, g.sum()))


def mul_const(tape, x: Var, c) -> Var:
    c = np.asarray(c, dtype=np.float64)
    return _op(tape, x.value * c, (x,), lambda g: (g * c,))


def add_const(tape, x: Var, c) -> Var:
    c = np.asarray(c, dtype=np.float64)
    return _op(tape, x.value + c, (x,), lambda g: (g,))


def elu(tape, x: Var) -> Var:
    xv = x.value
    value = np.where(xv > 0, xv, np.expm1(np.minimum(xv, 0.0)))
    deriv = np.where(xv > 0, 1.0, np.exp(np.minimum(xv, 0.0)))
    return _op(tape, value, (x,), lambda g: (g * deriv,))


def relu(tape, x: Var) -> Var:
    xv = x.value
    return _op(tape, np.maximum(xv, 0.0), (x,), lambda g: (g * (xv > 0),))


def softmax_last(tape, x: Var, mask=None) -> Var:
    """Softmax over the last axis, max-subtracted for overflow safety.

    `mask` is an optional constant boolean array (broadcastable to x);
    False entries are treated as -inf and get weight exactly 0. Every
    row must contain at least one valid entry.
    """
    xv = x.value
    if mask is not None:
        xv = np.where(mask, xv, -np.inf)
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _op(tape, y, (x,), vjp)


def mean_axis0(tape, x: Var) -> Var:
    n = x.value.shape[0]
    shape = x.value.shape
    return _op(
        tape,
        x.value.mean(axis=0),
        (x,),
        lambda g: (np.broadcast_to(g / n, shape),),
    )


def max_axis0(tape, x: Var) -> Var:
    """Columnwise max of a 2-d array; gradient flows to first argmax."""
    xv = x.value
    idx = xv.argmax(axis=0)

    def vjp(g):
        z = np.zeros_like(xv)
        z[idx, np.arange(xv.shape[1])] = g
        return (z,)

    return _op(tape, xv.max(axis=0), (x,), vjp)


def sum_axis1(tape, x: Var) -> Var:
    """(T, S, C) -> (T, C)."""
    shape = x.value.shape
    return _op(
        tape,
        x.value.sum(axis=1),
        (x,),
        lambda g: (np.broadcast_to(g[:, None, :], shape),),
    )


def max_axis1(tape, x: Var) -> Var:
    """(T, S, C) -> (T, C); gradient flows to first argmax."""
    xv = x.value
    idx = xv.argmax(axis=1)

    def vjp(g):
        z = np.zeros_like(xv)
        np.put_along_axis(z, idx[:, None, :], g[:, None, :], axis=1)
        return (z,)

    return _op(tape, xv.max(axis=1), (x,), vjp)


def broadcast_axis1(tape, x: Var, size: int) -> Var:
    """(T, 1, C) -> (T, size, C)."""
    shape = (x.value.shape[0], size, x.value.shape[2])
    return _op(
        tape,
        np.broadcast_to(x.value, shape).copy(),
        (x,),
        lambda g: (g.sum(axis=1, keepdims=True),),
    )


def dot(tape, u: Var, v: Var) -> Var:
    uv, vv = u.value, v.value
    return _op(tape, np.dot(uv, vv), (u, v), lambda g: (g * vv, g * uv))


def sqrt(tape, x: Var) -> Var:
    root = np.sqrt(x.value)
    return _op(tape, root, (x,), lambda g: (g / (2.0 * root),))
