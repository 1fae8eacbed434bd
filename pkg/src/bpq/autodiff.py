"""Scalar reverse-mode differentiation on an explicit tape.

Values are plain Python floats; vectors are lists of scalars.  Every
primitive accepts floats or :class:`Var` and only records an operation
when at least one operand lives on a tape, so the same expression code
runs in a fast float-only mode and in a differentiable mode.
"""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .errors import NumericalError

_LEAF_KINDS = ("param", "input")


class Tape:
    """Append-only record of primitive operations.

    ``kinds[i]`` names the op that produced value ``i``; ``args[i]`` holds,
    per operand, either a tape index (int) or ``None`` when the operand was
    a constant, whose value then sits at the same position in ``consts[i]``.
    """

    __slots__ = ("kinds", "args", "consts", "partials", "values", "meta", "_param_index")

    def __init__(self):
        self.kinds: list[str] = []
        self.args: list[tuple] = []
        self.consts: list[tuple] = []
        self.partials: list[tuple] = []
        self.values: list[float] = []
        self.meta: list = []
        self._param_index: dict = {}

    def __len__(self):
        return len(self.values)

    def _push(self, kind, args, consts, partials, value, meta=None) -> "Var":
        if not math.isfinite(value):
            raise NumericalError(f"non-finite value {value!r} produced by {kind}")
        self.kinds.append(kind)
        self.args.append(args)
        self.consts.append(consts)
        self.partials.append(partials)
        self.values.append(value)
        self.meta.append(meta)
        return Var(self, len(self.values) - 1, value)

    def param(self, name: str, coord, value: float) -> "Var":
        """Leaf for one coordinate of a named parameter (shared per tape)."""
        key = (name, coord)
        idx = self._param_index.get(key)
        if idx is not None:
            return Var(self, idx, self.values[idx])
        v = self._push("param", (), (), (), float(value), key)
        self._param_index[key] = v.idx
        return v

    def input(self, value: float, label=None) -> "Var":
        """Leaf carrying a value that is not a parameter (noise, observations)."""
        return self._push("input", (), (), (), float(value), label)

    def param_leaves(self):
        return dict(self._param_index)

    def replay(self) -> list[float]:
        """Recompute every value from the leaves, in recording order."""
        out: list[float] = []
        for kind, args, consts, value in zip(self.kinds, self.args, self.consts, self.values):
            if kind in _LEAF_KINDS:
                out.append(value)
                continue
            operands = [c if a is None else out[a] for a, c in zip(args, consts)]
            out.append(_FORWARD[kind](*operands))
        return out


class Var:
    """A scalar value recorded on a tape."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape: Tape, idx: int, value: float):
        self.tape = tape
        self.idx = idx
        self.value = value

    def __repr__(self):
        return f"Var({self.value!r}, idx={self.idx})"

    def __float__(self):
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pos__(self):
        return self


def value_of(x):
    """Strip tape information from a scalar, vector or tuple."""
    if isinstance(x, Var):
        return x.value
    if isinstance(x, list):
        return [value_of(v) for v in x]
    if isinstance(x, tuple):
        return tuple(value_of(v) for v in x)
    return x


def is_var(x) -> bool:
    return isinstance(x, Var)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _split(x):
    if isinstance(x, Var):
        return x.idx, None, x.value
    return None, float(x), float(x)


def _binary(kind, a, b, value, da, db):
    tape = _tape_of(a, b)
    if tape is None:
        return value
    ia, ca, _ = _split(a)
    ib, cb, _ = _split(b)
    return tape._push(kind, (ia, ib), (ca, cb), (da, db), value)


def _unary(kind, a, value, da, extra=()):
    if not isinstance(a, Var):
        return value
    return a.tape._push(kind, (a.idx,) + (None,) * len(extra), (None,) + tuple(extra), (da,), value)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary("add", a, b, av + bv, 1.0, 1.0)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary("sub", a, b, av - bv, 1.0, -1.0)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary("mul", a, b, av * bv, bv, av)


def div(a, b):
    av, bv = value_of(a), value_of(b)
    if bv == 0:
        raise NumericalError("division by zero")
    return _binary("div", a, b, av / bv, 1.0 / bv, -av / (bv * bv))


def neg(a):
    return _unary("neg", a, -value_of(a), -1.0)


def exp(a):
    av = value_of(a)
    try:
        e = math.exp(av)
    except OverflowError as exc:
        raise NumericalError(f"exp overflow at {av!r}") from exc
    return _unary("exp", a, e, e)


def log(a):
    av = value_of(a)
    if not av > 0:
        raise NumericalError(f"log of non-positive value {av!r}")
    return _unary("log", a, math.log(av), 1.0 / av)


def tanh(a):
    t = math.tanh(value_of(a))
    return _unary("tanh", a, t, 1.0 - t * t)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def sigmoid(a):
    s = _sigmoid(value_of(a))
    return _unary("sigmoid", a, s, s * (1.0 - s))


def clip(a, lo: float, hi: float):
    """Clamp to [lo, hi]; the derivative is 0 on and outside the boundaries."""
    av = value_of(a)
    v = min(max(av, lo), hi)
    d = 1.0 if lo < av < hi else 0.0
    return _unary("clip", a, v, d, (float(lo), float(hi)))


def stop_gradient(a):
    """Same value, no gradient path back to ``a``."""
    if isinstance(a, list):
        return [stop_gradient(v) for v in a]
    if isinstance(a, tuple):
        return tuple(stop_gradient(v) for v in a)
    if not isinstance(a, Var):
        return a
    return a.tape._push("stop", (None,), (a.value,), (), a.value)


def total(xs: Iterable):
    acc = 0.0
    for x in xs:
        acc = add(acc, x) if isinstance(x, Var) or isinstance(acc, Var) else acc + x
    return acc


def affine(w, x, b=0.0):
    """``sum_i w[i] * x[i] + b`` over equal-length vectors."""
    if len(w) != len(x):
        raise ValueError(f"affine: length mismatch {len(w)} vs {len(x)}")
    acc = b
    for wi, xi in zip(w, x):
        acc = add(acc, mul(wi, xi))
    return acc


def concat(*parts):
    out = []
    for p in parts:
        if isinstance(p, (list, tuple)):
            out.extend(p)
        else:
            out.append(p)
    return out


def index(vec, i):
    """Select ``vec[i]`` for an integer-valued ``i``."""
    iv = value_of(i)
    k = int(round(iv))
    if abs(iv - k) > 1e-12:
        raise ValueError(f"index: non-integer position {iv!r}")
    if not 0 <= k < len(vec):
        raise IndexError(f"index {k} out of range for length {len(vec)}")
    return vec[k]


def logsumexp(xs):
    m = max(value_of(x) for x in xs)
    return add(m, log(total(exp(sub(x, m)) for x in xs)))


_FORWARD = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "neg": lambda a: -a,
    "exp": math.exp,
    "log": math.log,
    "tanh": math.tanh,
    "sigmoid": _sigmoid,
    "clip": lambda a, lo, hi: min(max(a, lo), hi),
    "stop": lambda a: a,
}


def backward(tape: Tape, seeds, params=None) -> dict[str, np.ndarray]:
    """Reverse sweep from seeded outputs; returns gradients per parameter name.

    ``seeds`` maps output Vars to their adjoints (a bare Var means adjoint 1).
    When ``params`` (a ParamStore) is given, every registered parameter gets
    an entry, zero when it never reached the tape.
    """
    adj = backward_adjoints(tape, seeds)
    grads: dict[str, np.ndarray] = {}
    if params is not None:
        for name in params.names():
            grads[name] = np.zeros(params.shape(name))
    for (name, coord), idx in tape._param_index.items():
        g = grads.get(name)
        if g is None:
            shape = () if coord is None else None
            if params is not None:
                shape = params.shape(name)
            elif coord is not None:
                shape = (max(c for (n, c) in tape._param_index if n == name) + 1,)
            g = grads[name] = np.zeros(shape)
        if coord is None:
            g[()] += adj[idx]
        else:
            g[coord] += adj[idx]
    return grads


def backward_adjoints(tape: Tape, seeds) -> list[float]:
    if isinstance(seeds, Var):
        seeds = {seeds: 1.0}
    adj = [0.0] * len(tape.values)
    for v, a in seeds.items():
        if isinstance(v, Var):
            if v.tape is not tape:
                raise ValueError("seed variable belongs to another tape")
            adj[v.idx] += float(a)
    args, partials = tape.args, tape.partials
    for i in range(len(adj) - 1, -1, -1):
        ai = adj[i]
        if ai == 0.0:
            continue
        for j, d in zip(args[i], partials[i]):
            if j is not None:
                adj[j] += ai * d
    return adj


def grad_wrt(output, inputs) -> list[float]:
    """d output / d input for each Var in ``inputs`` (0 for non-Vars)."""
    if not isinstance(output, Var):
        return [0.0 for _ in inputs]
    adj = backward_adjoints(output.tape, {output: 1.0})
    return [adj[x.idx] if isinstance(x, Var) and x.tape is output.tape else 0.0 for x in inputs]
