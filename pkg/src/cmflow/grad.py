"""Tape-based reverse-mode differentiation over numpy arrays, plus Adam.

Every node on a :class:`Tape` holds a float64 array.  Operations broadcast
like numpy; the backward pass reduces adjoints back to each operand's shape.
A tape is rebuilt for every batch, so nothing here tries to be clever about
graph reuse.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, log_expit, logsumexp as _np_logsumexp

__all__ = [
    "Tape", "Var", "GradError", "backward", "AdamState", "adam_step", "grad_check",
    "add", "sub", "mul", "div", "neg", "matmul", "affine", "sum", "mean", "exp", "log",
    "sigmoid", "log_sigmoid", "logit", "softplus", "softmax", "log_softmax", "logsumexp",
    "tanh", "square", "clip", "concat", "take", "transpose", "reshape", "ParamSet",
]


class GradError(ValueError):
    """Raised for malformed graphs or non-finite forward values."""


class Tape:
    """Append-only record of primitive operations."""

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[Callable | None] = []
        self.params: list[int] = []

    def __len__(self) -> int:
        return len(self.values)

    def _push(self, value, parents=(), vjp=None) -> "Var":
        self.values.append(np.asarray(value, dtype=np.float64))
        self.parents.append(tuple(parents))
        self.vjps.append(vjp)
        return Var(self, len(self.values) - 1)

    def param(self, value) -> "Var":
        v = self._push(np.array(value, dtype=np.float64))
        self.params.append(v.idx)
        return v

    def const(self, value) -> "Var":
        return self._push(np.array(value, dtype=np.float64))


class Var:
    __slots__ = ("tape", "idx")

    def __init__(self, tape: Tape, idx: int) -> None:
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(idx={self.idx}, shape={self.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise GradError("operands live on different tapes")
        return x
    return tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise GradError("at least one operand must be a Var")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, vjp_a, vjp_b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    out = fwd(av, bv)

    def vjp(g):
        return (_unbroadcast(vjp_a(g, av, bv, out), av.shape),
                _unbroadcast(vjp_b(g, av, bv, out), bv.shape))

    return tape._push(out, (a.idx, b.idx), vjp)


def _unary(x: Var, out: np.ndarray, dfn) -> Var:
    def vjp(g):
        return (dfn(g),)

    return x.tape._push(out, (x.idx,), vjp)


def add(a, b) -> Var:
    return _binary(a, b, np.add, lambda g, *_: g, lambda g, *_: g)


def sub(a, b) -> Var:
    return _binary(a, b, np.subtract, lambda g, *_: g, lambda g, *_: -g)


def mul(a, b) -> Var:
    return _binary(a, b, np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)


def div(a, b) -> Var:
    return _binary(a, b, np.divide, lambda g, a, b, o: g / b, lambda g, a, b, o: -g * o / b)


def neg(x: Var) -> Var:
    return _unary(x, -x.value, lambda g: -g)


def matmul(a, b) -> Var:
    """Matrix product of 2-D operands (a batch of row vectors times a matrix)."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise GradError("matmul expects 2-D operands")

    def vjp(g):
        return g @ bv.T, av.T @ g

    return tape._push(av @ bv, (a.idx, b.idx), vjp)


def affine(x: Var, weight, bias) -> Var:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    tape = _tape_of(x, weight, bias)
    x, w, b = _lift(tape, x), _lift(tape, weight), _lift(tape, bias)
    xv, wv, bv = x.value, w.value, b.value

    def vjp(g):
        return g @ wv, g.T @ xv, _unbroadcast(g, bv.shape)

    return tape._push(xv @ wv.T + bv, (x.idx, w.idx, b.idx), vjp)


def sum(x: Var, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    xv = x.value
    out = np.sum(xv, axis=axis, keepdims=keepdims)

    def dfn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xv.shape).copy()

    return _unary(x, out, dfn)


def mean(x: Var, axis=None) -> Var:
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def exp(x: Var) -> Var:
    out = np.exp(x.value)
    return _unary(x, out, lambda g: g * out)


def log(x: Var) -> Var:
    xv = x.value
    return _unary(x, np.log(xv), lambda g: g / xv)


def square(x: Var) -> Var:
    xv = x.value
    return _unary(x, xv * xv, lambda g: 2.0 * g * xv)


def sigmoid(x: Var) -> Var:
    out = expit(x.value)
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def log_sigmoid(x: Var) -> Var:
    xv = x.value
    return _unary(x, log_expit(xv), lambda g: g * expit(-xv))


def logit(x: Var) -> Var:
    xv = x.value
    return _unary(x, np.log(xv) - np.log1p(-xv), lambda g: g / (xv * (1.0 - xv)))


def softplus(x: Var) -> Var:
    xv = x.value
    return _unary(x, np.logaddexp(0.0, xv), lambda g: g * expit(xv))


def tanh(x: Var) -> Var:
    out = np.tanh(x.value)
    return _unary(x, out, lambda g: g * (1.0 - out * out))


def softmax(x: Var) -> Var:
    """Softmax over the last axis (row-wise for matrices)."""
    xv = x.value
    z = np.exp(xv - xv.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)
    return _unary(x, out, lambda g: out * (g - (g * out).sum(axis=-1, keepdims=True)))


def log_softmax(x: Var) -> Var:
    xv = x.value
    out = xv - _np_logsumexp(xv, axis=-1, keepdims=True)
    p = np.exp(out)
    return _unary(x, out, lambda g: g - p * g.sum(axis=-1, keepdims=True))


def logsumexp(x: Var, axis: int = -1) -> Var:
    xv = x.value
    out = _np_logsumexp(xv, axis=axis)
    w = np.exp(xv - np.expand_dims(out, axis))
    return _unary(x, out, lambda g: np.expand_dims(g, axis) * w)


def clip(x: Var, lo: float, hi: float) -> Var:
    """Clamp with zero gradient outside ``[lo, hi]``."""
    xv = x.value
    inside = (xv >= lo) & (xv <= hi)
    return _unary(x, np.clip(xv, lo, hi), lambda g: g * inside)


def concat(xs: Sequence[Var], axis: int = 0) -> Var:
    tape = _tape_of(*xs)
    xs = [_lift(tape, x) for x in xs]
    vals = [x.value for x in xs]
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._push(np.concatenate(vals, axis=axis), tuple(x.idx for x in xs), vjp)


def take(x: Var, index) -> Var:
    xv = x.value

    def dfn(g):
        out = np.zeros_like(xv)
        np.add.at(out, index, g)
        return out

    return _unary(x, xv[index], dfn)


def transpose(x: Var) -> Var:
    return _unary(x, x.value.T, lambda g: g.T)


def reshape(x: Var, shape) -> Var:
    xv = x.value
    return _unary(x, xv.reshape(shape), lambda g: g.reshape(xv.shape))


def backward(tape: Tape, output: Var, wrt: Sequence[Var] | None = None) -> list[np.ndarray]:
    """Reverse sweep from a scalar ``output``.

    Returns one gradient array per parameter leaf (in creation order), or per
    entry of ``wrt`` when given.  Adjoints live in a fresh buffer on each call,
    so repeated calls return identical results.
    """
    if output.tape is not tape:
        raise GradError("output node belongs to another tape")
    if output.value.size != 1:
        raise GradError(f"output must be scalar, got shape {output.value.shape}")
    n = output.idx + 1
    for i in range(n):
        if np.isnan(tape.values[i]).any():
            raise GradError(f"NaN in forward value of node {i}")
    adj: list[np.ndarray | None] = [None] * n
    adj[output.idx] = np.ones_like(tape.values[output.idx])
    for i in range(output.idx, -1, -1):
        g = adj[i]
        vjp = tape.vjps[i]
        if g is None or vjp is None:
            continue
        for p, gp in zip(tape.parents[i], vjp(g)):
            adj[p] = gp if adj[p] is None else adj[p] + gp
    targets = [v.idx for v in wrt] if wrt is not None else tape.params
    return [np.zeros_like(tape.values[i]) if i >= n or adj[i] is None else adj[i]
            for i in targets]


class ParamSet:
    """Ordered named arrays with a flat-vector view for optimizers."""

    def __init__(self, arrays: dict[str, np.ndarray]) -> None:
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    @property
    def size(self) -> int:
        return int(np.sum([a.size for a in self.arrays.values()]))

    def to_vector(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def with_vector(self, vec: np.ndarray) -> "ParamSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError(f"expected {self.size} values, got {vec.size}")
        out, pos = {}, 0
        for k, a in self.arrays.items():
            out[k] = vec[pos:pos + a.size].reshape(a.shape).copy()
            pos += a.size
        return ParamSet(out)

    def on_tape(self, tape: Tape) -> dict[str, Var]:
        return {k: tape.param(a) for k, a in self.arrays.items()}

    def to_json(self) -> dict:
        return {k: a.tolist() for k, a in self.arrays.items()}

    @classmethod
    def from_json(cls, d: dict) -> "ParamSet":
        return cls({k: np.array(v, dtype=np.float64) for k, v in d.items()})


def partial_objective(params: ParamSet, keys, loss: Callable[[Tape, dict[str, Var]], Var]):
    """``(f, theta0)`` for :func:`grad_check` over the arrays named in ``keys``.

    The remaining arrays enter the graph as constants.  Useful to skip
    parameters whose exact gradient is identically zero, where the relative
    error is dominated by rounding residue.
    """
    keys = [k for k in params.arrays if k in set(keys)]
    fixed = {k: v for k, v in params.arrays.items() if k not in keys}
    theta0 = np.concatenate([params.arrays[k].ravel() for k in keys]) if keys else np.zeros(0)

    def f(tape: Tape, theta: Var) -> Var:
        raw, pos = {k: tape.const(v) for k, v in fixed.items()}, 0
        for k in keys:
            arr = params.arrays[k]
            raw[k] = reshape(take(theta, slice(pos, pos + arr.size)), arr.shape)
            pos += arr.size
        return loss(tape, raw)

    return f, theta0


@dataclass(frozen=True)
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def fresh(cls, n: int, **kw) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), **kw)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, AdamState]:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    m, v = state.m, state.v
    if m.shape != params.shape:
        if m.size:
            raise ValueError(f"optimizer state has shape {m.shape}, params {params.shape}")
        m = v = np.zeros_like(params)
    t = state.step + 1
    m = state.beta1 * m + (1.0 - state.beta1) * grads
    v = state.beta2 * v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, step=t, m=m, v=v)


def grad_check(f: Callable[[Tape, Var], Var], params: np.ndarray, h: float = 1e-5,
               floor: float = 1e-12) -> float:
    """Max of ``|analytic - numeric| / (|analytic| + floor)`` over coordinates.

    ``numeric`` is the central difference with step ``h``; ``f(tape, x)``
    builds a scalar from the parameter vector leaf ``x``.  The default floor
    makes this a pure relative error.  A central difference resolves a
    gradient only to about ``1e-10`` absolute for O(1) objectives, so a
    larger ``floor`` turns the check into an absolute one for coordinates
    whose gradient is below that resolution.
    """
    params = np.asarray(params, dtype=np.float64)

    def value(p):
        tape = Tape()
        out = f(tape, tape.param(p))
        val = float(out.value)
        if not np.isfinite(val):
            raise GradError("non-finite evaluation in grad_check")
        return val

    tape = Tape()
    x = tape.param(params)
    (analytic,) = backward(tape, f(tape, x), wrt=[x])
    if not np.all(np.isfinite(analytic)):
        raise GradError("non-finite analytic gradient")
    numeric = np.empty_like(params)
    flat = params.ravel()
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        # divide by the step actually taken, not the nominal 2h
        numeric.flat[i] = (value(up.reshape(params.shape)) - value(dn.reshape(params.shape))) / (up[i] - dn[i])
    err = np.abs(analytic - numeric) / (np.abs(analytic) + floor)
    return float(err.max()) if err.size else 0.0
