"""Define-by-run reverse-mode differentiation over float64 arrays of rank <= 2.

A :class:`Tape` records every operation applied to its tensors.  Calling
``tape.backward(out)`` walks the records once in reverse order and fills
``.grad`` on every leaf.  A tape may be differentiated only once; build a
new tape for every forward pass.

    tape = Tape()
    w = tape.leaf(np.ones((3, 2)))
    x = tape.constant(np.arange(6.0).reshape(2, 3))
    loss = ad.sum(ad.square(x @ w))
    tape.backward(loss)
    w.grad
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import expit

from .errors import NonScalarOutput, NumericalBlowup, ShapeMismatch, TapeConsumed


class Tensor:
    __slots__ = ("value", "tape", "id", "requires_grad", "grad")
    __array_priority__ = 100.0

    def __init__(self, value, tape, node_id, requires_grad):
        self.value = value
        self.tape = tape
        self.id = node_id
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)


@dataclass
class _Record:
    output: int
    inputs: tuple
    vjp: object  # callable(g) -> tuple of input adjoints (None for constants)


class Tape:
    def __init__(self):
        self._records = []
        self._tensors = []
        self._leaves = []
        self._consumed = False

    def __len__(self):
        return len(self._tensors)

    def _new(self, value, requires_grad):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > 2:
            raise ShapeMismatch(f"rank {value.ndim} > 2 not supported")
        t = Tensor(value, self, len(self._tensors), requires_grad)
        self._tensors.append(t)
        return t

    def leaf(self, value):
        """A differentiable input; receives ``.grad`` after backward."""
        t = self._new(np.array(value, dtype=np.float64), True)
        self._leaves.append(t)
        return t

    def constant(self, value):
        return self._new(value, False)

    def _record(self, value, inputs, vjp):
        if not np.all(np.isfinite(value)):
            raise NumericalBlowup("non-finite value produced in forward pass")
        needs = any(t.requires_grad for t in inputs)
        out = self._new(value, needs)
        if needs:
            self._records.append(_Record(out.id, tuple(t.id for t in inputs), vjp))
        return out

    def backward(self, output):
        """Propagate d(output)/d(leaf) into ``leaf.grad`` for every leaf on this tape.

        Leaves that do not influence ``output`` get a zero gradient.  The tape is
        consumed afterwards; a second call raises :class:`TapeConsumed`.
        """
        if output.tape is not self:
            raise ValueError("output tensor belongs to a different tape")
        if output.value.size != 1:
            raise NonScalarOutput(f"backward needs a scalar output, got shape {output.shape}")
        if self._consumed:
            raise TapeConsumed("backward already ran on this tape; rebuild the forward pass")
        self._consumed = True

        adj = {output.id: np.ones_like(output.value)}
        for rec in reversed(self._records):
            if rec.output > output.id:
                continue
            g = adj.pop(rec.output, None)
            if g is None:
                continue
            for tid, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not self._tensors[tid].requires_grad:
                    continue
                if tid in adj:
                    adj[tid] = adj[tid] + gi
                else:
                    adj[tid] = gi
        for t in self._leaves:
            g = adj.get(t.id)
            t.grad = np.zeros_like(t.value) if g is None else g
        return output


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one operand must be a Tensor")


def _lift(tape, x):
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- primitive operations ---------------------------------------------------

def add(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a.value, b.value)
    sa, sb = a.shape, b.shape
    return tape._record(a.value + b.value, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a.value, b.value)
    sa, sb = a.shape, b.shape
    return tape._record(a.value - b.value, (a, b),
                        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    """Elementwise product with broadcasting."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_shape(a.value, b.value)
    av, bv = a.value, b.value
    ga, gb = a.requires_grad, b.requires_grad
    return tape._record(av * bv, (a, b),
                        lambda g: (_unbroadcast(g * bv, av.shape) if ga else None,
                                   _unbroadcast(g * av, bv.shape) if gb else None))


def scalar_mul(a, c):
    c = float(c)
    return a.tape._record(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul {av.shape} @ {bv.shape}")

    ga, gb = a.requires_grad, b.requires_grad

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            da, db = (lambda: g * bv), (lambda: g * av)
        elif av.ndim == 1:
            da, db = (lambda: bv @ g), (lambda: np.outer(av, g))
        elif bv.ndim == 1:
            da, db = (lambda: np.outer(g, bv)), (lambda: av.T @ g)
        else:
            da, db = (lambda: g @ bv.T), (lambda: av.T @ g)
        return (da() if ga else None), (db() if gb else None)

    return tape._record(av @ bv, (a, b), vjp)


def sigmoid(a):
    s = expit(a.value)
    return a.tape._record(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a):
    t = np.tanh(a.value)
    return a.tape._record(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a):
    mask = a.value > 0.0
    return a.tape._record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def abs_(a):
    sign = np.sign(a.value)
    return a.tape._record(np.abs(a.value), (a,), lambda g: (g * sign,))


def square(a):
    v = a.value
    return a.tape._record(v * v, (a,), lambda g: (2.0 * g * v,))


def sum(a):  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return a.tape._record(np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a):
    shape, n = a.shape, a.value.size
    return a.tape._record(np.asarray(a.value.mean()), (a,),
                          lambda g: (np.full(shape, float(g) / n),))


def reshape(a, shape):
    old = a.shape
    return a.tape._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def slice_(a, index):
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return a.tape._record(np.array(a.value[index]), (a,), vjp)


def concat(tensors, axis=0):
    tape = _tape_of(*tensors)
    tensors = [_lift(tape, t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return tape._record(value, tuple(tensors), vjp)


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


@njit(cache=True)
def _adam_kernel(p, g, m, v, b1, b2, step, bc2, eps):
    # one fused pass; the arrays are large enough that memory traffic dominates
    for i in range(p.size):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] -= step * m[i] / (np.sqrt(v[i] / bc2) + eps)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on ``params``; returns ``params``."""
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} params but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"param {p.shape}, grad {g.shape}, moment {m.shape}")
        if not p.flags.c_contiguous:
            raise ShapeMismatch("parameters must be C-contiguous to be updated in place")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    step = state.lr / bc1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        _adam_kernel(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                     m.reshape(-1), v.reshape(-1), b1, b2, step, bc2, state.eps)
    return params
