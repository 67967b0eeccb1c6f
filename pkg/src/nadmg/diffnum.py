"""Small reverse-mode autodiff engine over dense float64 arrays.

Values are recorded on a :class:`Tape` as operations are applied. A single
reverse sweep over the tape (:func:`grad`) yields gradients for any set of
leaves. Values that do not descend from a tape leaf are constants: ops on
them run eagerly and record nothing, which keeps evaluation-only code paths
cheap.

Arrays may carry leading batch axes; elementwise ops follow numpy
broadcasting and ``matmul`` broadcasts over batch axes like ``np.matmul``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "DiffnumError",
    "ShapeError",
    "Tape",
    "Value",
    "AdamState",
    "adam_step",
    "as_value",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softplus",
    "log_sigmoid",
    "square",
    "sum",
    "mean",
    "broadcast_to",
    "concat",
    "stack",
    "getitem",
    "reshape",
    "transpose",
    "trace",
    "expm",
    "gumbel_softmax_st",
    "gumbel_sigmoid_st",
    "grad",
]


class DiffnumError(ValueError):
    pass


class ShapeError(DiffnumError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


BackwardFn = Callable[[np.ndarray, tuple], tuple]


class Tape:
    """Ordered record of primitive operations.

    Node ids are assigned in creation order, so every parent precedes its
    consumer and a reversed sweep is a valid reverse topological order.
    """

    def __init__(self):
        self.nodes: list[tuple[int, tuple, BackwardFn]] = []
        self._next_id = 0

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def leaf(self, data) -> "Value":
        arr = np.array(data, dtype=np.float64)
        return Value(arr, self, self._new_id())

    def leaves(self, arrays: dict) -> dict:
        return {k: self.leaf(v) for k, v in arrays.items()}

    def __len__(self):
        return len(self.nodes)


class Value:
    __slots__ = ("data", "tape", "id")
    __array_priority__ = 1000

    def __init__(self, data: np.ndarray, tape: Optional[Tape] = None, id: Optional[int] = None):
        self.data = data
        self.tape = tape
        self.id = id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise DiffnumError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        kind = "tracked" if self.tracked else "const"
        return f"Value({kind}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_value(x) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=np.float64))


def _record(data: np.ndarray, parents: Sequence[Value], backward: BackwardFn) -> Value:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise DiffnumError("operands were recorded on different tapes")
            tape = p.tape
    if tape is None:
        return Value(data)
    out = Value(data, tape, tape._new_id())
    tape.nodes.append((out.id, tuple(p.id for p in parents), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op: str, a, b, fn):
    a, b = as_value(a), as_value(b)
    try:
        out = fn(a.data, b.data)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    return a, b, out


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Value:
    a, b, out = _binary("add", a, b, np.add)
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g, need: (
        _unbroadcast(g, sa) if need[0] else None,
        _unbroadcast(g, sb) if need[1] else None,
    ))


def sub(a, b) -> Value:
    a, b, out = _binary("sub", a, b, np.subtract)
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g, need: (
        _unbroadcast(g, sa) if need[0] else None,
        _unbroadcast(-g, sb) if need[1] else None,
    ))


def mul(a, b) -> Value:
    a, b, out = _binary("mul", a, b, np.multiply)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g, need: (
        _unbroadcast(g * bd, ad.shape) if need[0] else None,
        _unbroadcast(g * ad, bd.shape) if need[1] else None,
    ))


def div(a, b) -> Value:
    a, b, out = _binary("div", a, b, np.divide)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g, need: (
        _unbroadcast(g / bd, ad.shape) if need[0] else None,
        _unbroadcast(-g * ad / (bd * bd), bd.shape) if need[1] else None,
    ))


def neg(a) -> Value:
    a = as_value(a)
    return _record(-a.data, (a,), lambda g, need: (-g,))


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def backward(g, need):
        ga = gb = None
        if need[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if need[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _record(out, (a, b), backward)


# -- unary functions -------------------------------------------------------

def exp(a) -> Value:
    a = as_value(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g, need: (g * out,))


def log(a) -> Value:
    a = as_value(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g, need: (g / ad,))


def tanh(a) -> Value:
    a = as_value(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g, need: (g * (1.0 - out * out),))


def sigmoid(a) -> Value:
    a = as_value(a)
    out = expit(a.data)
    return _record(out, (a,), lambda g, need: (g * out * (1.0 - out),))


def softplus(a) -> Value:
    a = as_value(a)
    ad = a.data
    return _record(np.logaddexp(0.0, ad), (a,), lambda g, need: (g * expit(ad),))


def log_sigmoid(a) -> Value:
    return neg(softplus(neg(a)))


def square(a) -> Value:
    a = as_value(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g, need: (2.0 * g * ad,))


# -- reductions and shape manipulation ---------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Value:  # noqa: A001 - mirrors numpy
    a = as_value(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g, need):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out, dtype=np.float64), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def broadcast_to(a, shape) -> Value:
    a = as_value(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    src = a.shape
    return _record(out, (a,), lambda g, need: (_unbroadcast(g, src),))


def concat(values: Sequence, axis: int = -1) -> Value:
    vals = [as_value(v) for v in values]
    try:
        out = np.concatenate([v.data for v in vals], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[v.shape for v in vals]) from None
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g, need):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(out, vals, backward)


def stack(values: Sequence, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    try:
        out = np.stack([v.data for v in vals], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[v.shape for v in vals]) from None
    n = len(vals)

    def backward(g, need):
        parts = np.split(g, n, axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return _record(out, vals, backward)


def getitem(a, idx) -> Value:
    a = as_value(a)
    try:
        out = np.array(a.data[idx], dtype=np.float64)
    except IndexError as exc:
        raise ShapeError("getitem", a.shape) from exc
    shape = a.shape

    def backward(g, need):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return _record(out, (a,), backward)


def reshape(a, shape) -> Value:
    a = as_value(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return _record(out, (a,), lambda g, need: (g.reshape(src),))


def transpose(a, axes=None) -> Value:
    """Swap the last two axes, or permute by ``axes`` when given."""
    a = as_value(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape)
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g, need: (np.transpose(g, inv),))


def trace(a) -> Value:
    a = as_value(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError("trace", a.shape)
    n = a.shape[-1]
    eye = np.eye(n)
    return _record(np.trace(a.data, axis1=-2, axis2=-1), (a,),
                   lambda g, need: (np.asarray(g)[..., None, None] * eye,))


def expm(a, tol: float = 1e-12, max_terms: int = 60) -> Value:
    """Matrix exponential by scaling and squaring of a truncated Taylor series.

    Composed from recorded primitives, so it is differentiable through the
    series terms and the squarings.
    """
    a = as_value(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError("expm", a.shape)
    n = a.shape[-1]
    norm = float(np.max(np.abs(a.data).sum(axis=-2))) if a.data.size else 0.0
    squarings = 0 if norm <= 0.5 else int(np.ceil(np.log2(norm / 0.5)))
    x = mul(a, 0.5 ** squarings)
    total = add(np.broadcast_to(np.eye(n), a.shape), x)
    term = x
    for k in range(2, max_terms):
        term = mul(matmul(term, x), 1.0 / k)
        total = add(total, term)
        if np.max(np.abs(term.data), initial=0.0) < tol:
            break
    for _ in range(squarings):
        total = matmul(total, total)
    return total


# -- stochastic relaxations --------------------------------------------------

def gumbel_softmax_st(logits, temperature: float, rng: np.random.Generator,
                      noise: Optional[np.ndarray] = None, return_soft: bool = False):
    """Straight-through Gumbel-softmax over the last axis.

    The forward value is the exact one-hot argmax of ``(logits + g) / T``;
    the backward pass uses the Jacobian of the tempered softmax.
    """
    if not temperature > 0:
        raise DiffnumError(f"temperature must be positive, got {temperature}")
    logits = as_value(logits)
    if noise is None:
        noise = rng.gumbel(size=logits.shape)
    z = (logits.data + noise) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    soft = np.exp(z)
    soft /= soft.sum(axis=-1, keepdims=True)
    hard = np.zeros_like(soft)
    np.put_along_axis(hard, np.argmax(z, axis=-1)[..., None], 1.0, axis=-1)

    def backward(g, need):
        inner = np.sum(g * soft, axis=-1, keepdims=True)
        return (soft * (g - inner) / temperature,)

    out = _record(hard, (logits,), backward)
    return (out, soft) if return_soft else out


def gumbel_sigmoid_st(logits, temperature: float, rng: np.random.Generator,
                      noise: Optional[np.ndarray] = None, return_soft: bool = False, hard: bool = True):
    """Binary straight-through draw; same law as the 2-way softmax on ``(x, 0)``.

    The difference of two Gumbel variables is logistic, so ``noise`` is drawn
    from the standard logistic distribution. ``hard=False`` returns the relaxed
    value itself, whose gradient the straight-through backward then is exactly.
    """
    if not temperature > 0:
        raise DiffnumError(f"temperature must be positive, got {temperature}")
    logits = as_value(logits)
    if noise is None:
        noise = rng.logistic(size=logits.shape)
    z = (logits.data + noise) / temperature
    soft = expit(z)
    value = (z > 0).astype(np.float64) if hard else soft
    out = _record(value, (logits,), lambda g, need: (g * soft * (1.0 - soft) / temperature,))
    return (out, soft) if return_soft else out


# -- gradients ---------------------------------------------------------------

def grad(loss: Value, leaves: Sequence[Value]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each of ``leaves``.

    Leaves the loss does not depend on get zero arrays.
    """
    if loss.data.size != 1:
        raise DiffnumError(f"grad needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError(f"loss is not finite: {float(loss.data)}")
    for leaf in leaves:
        if leaf.tape is None or (loss.tape is not None and leaf.tape is not loss.tape):
            raise DiffnumError("leaf was not recorded on the loss tape")
    if loss.tape is None:
        return [np.zeros_like(leaf.data) for leaf in leaves]

    keep = {leaf.id for leaf in leaves}
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for out_id, parents, backward in reversed(loss.tape.nodes):
        if out_id > loss.id:
            continue
        g = grads.get(out_id) if out_id in keep else grads.pop(out_id, None)
        if g is None:
            continue
        need = tuple(p is not None for p in parents)
        for pid, pg in zip(parents, backward(g, need)):
            if pid is None or pg is None:
                continue
            prev = grads.get(pid)
            grads[pid] = pg if prev is None else prev + pg
    return [grads.get(leaf.id, np.zeros_like(leaf.data)).reshape(leaf.shape) for leaf in leaves]


# -- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def create(cls, params: Sequence[np.ndarray], lr: float, **kw) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kw)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DiffnumError("adam_step: parameter, gradient and state counts differ")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
