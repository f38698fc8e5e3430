"""Dense tensor arithmetic, a tape-based reverse-mode differentiator and Adam.

Tensors are plain ``numpy.ndarray`` objects in float64. A :class:`DiffGraph`
records every primitive applied to its values in execution order, so it can
be replayed (with optionally substituted leaves) and differentiated by
walking the record backwards.

Example
-------
>>> g = DiffGraph()
>>> w = g.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]), name="w")
>>> loss = (w * w).sum() * 0.5
>>> reverse_grad(g, loss)["w"]
array([[1., 2.],
       [3., 4.]])
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit

from .errors import GradientError, ShapeError

__all__ = [
    "as_tensor",
    "matmul",
    "DiffGraph",
    "Var",
    "Primitive",
    "register_primitive",
    "PRIMITIVES",
    "reverse_grad",
    "finite_diff_check",
    "FiniteDiffReport",
    "AdamState",
    "adam_step",
]


def as_tensor(x) -> np.ndarray:
    """Return `x` as a float64 array (no copy when already float64)."""
    return np.asarray(x, dtype=np.float64)


def _check_matmul(a_shape, b_shape):
    if len(a_shape) < 2 or len(b_shape) < 2 or a_shape[-1] != b_shape[-2]:
        raise ShapeError(
            f"matmul shape mismatch: {tuple(a_shape)} x {tuple(b_shape)}"
        )


def matmul(a, b) -> np.ndarray:
    """Matrix product with a shape check that names both operands.

    Leading axes broadcast as in ``numpy.matmul``.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    _check_matmul(a.shape, b.shape)
    return np.matmul(a, b)


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    """A differentiable operation.

    ``forward(*arrays, **attrs)`` returns ``(out, ctx)``; ``backward(gout,
    ctx, inputs, out, **attrs)`` returns one gradient (or None) per input.
    """

    name: str
    forward: Callable
    backward: Callable


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(name: str, forward: Callable, backward: Callable,
                       replace: bool = False) -> Primitive:
    """Add an op usable by :meth:`DiffGraph.apply`.

    ``forward(*values, **attrs)`` returns ``(out, ctx)``;
    ``backward(g, ctx, inputs, out, **attrs)`` returns one gradient (or None)
    per input.
    """
    if name in PRIMITIVES and not replace:
        raise ValueError(f"primitive {name!r} is already registered")
    prim = Primitive(name, forward, backward)
    PRIMITIVES[name] = prim
    return prim


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    n_extra = grad.ndim - len(shape)
    if n_extra > 0:
        grad = grad.sum(axis=tuple(range(n_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap(x):
    return np.swapaxes(x, -1, -2)


def _fwd_matmul(a, b):
    _check_matmul(a.shape, b.shape)
    return np.matmul(a, b), None


def _bwd_matmul(g, ctx, inputs, out):
    a, b = inputs
    return (_unbroadcast(np.matmul(g, _swap(b)), a.shape),
            _unbroadcast(np.matmul(_swap(a), g), b.shape))


def _fwd_add(a, b):
    return a + b, None


def _bwd_add(g, ctx, inputs, out):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _fwd_sub(a, b):
    return a - b, None


def _bwd_sub(g, ctx, inputs, out):
    a, b = inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _fwd_mul(a, b):
    return a * b, None


def _bwd_mul(g, ctx, inputs, out):
    a, b = inputs
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _fwd_scale(x, *, c):
    return x * c, None


def _bwd_scale(g, ctx, inputs, out, *, c):
    return (g * c,)


def _fwd_add_scalar(x, *, c):
    return x + c, None


def _bwd_add_scalar(g, ctx, inputs, out, *, c):
    return (g,)


def _fwd_concat(*xs, axis):
    return np.concatenate(xs, axis=axis), None


def _bwd_concat(g, ctx, inputs, out, *, axis):
    cuts = np.cumsum([x.shape[axis] for x in inputs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _fwd_row_slice(x, *, start, stop):
    return x[..., start:stop, :].copy(), None


def _bwd_row_slice(g, ctx, inputs, out, *, start, stop):
    gx = np.zeros_like(inputs[0])
    gx[..., start:stop, :] = g
    return (gx,)


def _fwd_sigmoid(x):
    return expit(x), None


def _bwd_sigmoid(g, ctx, inputs, out):
    return (g * out * (1.0 - out),)


def _fwd_tanh(x):
    return np.tanh(x), None


def _bwd_tanh(g, ctx, inputs, out):
    return (g * (1.0 - out * out),)


def _fwd_leaky_relu(x, *, slope):
    return np.where(x > 0, x, slope * x), None


def _bwd_leaky_relu(g, ctx, inputs, out, *, slope):
    return (np.where(inputs[0] > 0, g, slope * g),)


def _fwd_exp(x):
    return np.exp(x), None


def _bwd_exp(g, ctx, inputs, out):
    return (g * out,)


def _fwd_log(x, *, floor):
    return np.log(np.maximum(x, floor)), None


def _bwd_log(g, ctx, inputs, out, *, floor):
    x = inputs[0]
    return (np.where(x > floor, g / np.maximum(x, floor), 0.0),)


def _fwd_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True), None


def _bwd_softmax(g, ctx, inputs, out):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _fwd_sum(x, *, axis, keepdims):
    return np.sum(x, axis=axis, keepdims=keepdims), None


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _bwd_sum(g, ctx, inputs, out, *, axis, keepdims):
    return (_expand_reduced(g, inputs[0].shape, axis, keepdims).copy(),)


def _fwd_mean(x, *, axis, keepdims):
    return np.mean(x, axis=axis, keepdims=keepdims), None


def _bwd_mean(g, ctx, inputs, out, *, axis, keepdims):
    x = inputs[0]
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return (_expand_reduced(g, x.shape, axis, keepdims) / n,)


def _fwd_transpose(x):
    return _swap(x).copy(), None


def _bwd_transpose(g, ctx, inputs, out):
    return (_swap(g),)


def _fwd_reshape(x, *, shape):
    return x.reshape(shape), None


def _bwd_reshape(g, ctx, inputs, out, *, shape):
    return (g.reshape(inputs[0].shape),)


def _fwd_stack(*xs):
    return np.stack(xs), None


def _bwd_stack(g, ctx, inputs, out):
    return tuple(g[i] for i in range(len(inputs)))


def _fwd_take(x, *, index):
    return x[index].copy(), None


def _bwd_take(g, ctx, inputs, out, *, index):
    gx = np.zeros_like(inputs[0])
    gx[index] = g
    return (gx,)


for _name, _f, _b in [
    ("matmul", _fwd_matmul, _bwd_matmul),
    ("add", _fwd_add, _bwd_add),
    ("sub", _fwd_sub, _bwd_sub),
    ("multiply", _fwd_mul, _bwd_mul),
    ("scale", _fwd_scale, _bwd_scale),
    ("add_scalar", _fwd_add_scalar, _bwd_add_scalar),
    ("concat", _fwd_concat, _bwd_concat),
    ("row_slice", _fwd_row_slice, _bwd_row_slice),
    ("sigmoid", _fwd_sigmoid, _bwd_sigmoid),
    ("tanh", _fwd_tanh, _bwd_tanh),
    ("leaky_relu", _fwd_leaky_relu, _bwd_leaky_relu),
    ("exp", _fwd_exp, _bwd_exp),
    ("log", _fwd_log, _bwd_log),
    ("softmax_row", _fwd_softmax, _bwd_softmax),
    ("sum", _fwd_sum, _bwd_sum),
    ("mean", _fwd_mean, _bwd_mean),
    ("transpose", _fwd_transpose, _bwd_transpose),
    ("reshape", _fwd_reshape, _bwd_reshape),
    ("stack", _fwd_stack, _bwd_stack),
    ("take", _fwd_take, _bwd_take),
]:
    register_primitive(_name, _f, _b)


# --------------------------------------------------------------------------
# graph
# --------------------------------------------------------------------------

@dataclass
class _Record:
    op: str | None                  # None marks a leaf
    inputs: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    trainable: bool = False
    needs_grad: bool = False


class Var:
    """Handle to one value slot of a :class:`DiffGraph`."""

    __slots__ = ("graph", "slot")
    __array_priority__ = 1000

    def __init__(self, graph: "DiffGraph", slot: int):
        self.graph = graph
        self.slot = slot

    @property
    def value(self) -> np.ndarray:
        return self.graph.values[self.slot]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Var(slot={self.slot}, shape={self.shape})"

    def _ap(self, op, *others, **attrs):
        return self.graph.apply(op, self, *others, **attrs)

    def __add__(self, other):
        if np.isscalar(other):
            return self._ap("add_scalar", c=float(other))
        return self._ap("add", other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if np.isscalar(other):
            return self._ap("add_scalar", c=-float(other))
        return self._ap("sub", other)

    def __rsub__(self, other):
        if np.isscalar(other):
            return self._ap("scale", c=-1.0)._ap("add_scalar", c=float(other))
        return self.graph.apply("sub", other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self._ap("scale", c=float(other))
        return self._ap("multiply", other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return self._ap("scale", c=1.0 / float(other))

    def __neg__(self):
        return self._ap("scale", c=-1.0)

    def __matmul__(self, other):
        return self._ap("matmul", other)

    def __rmatmul__(self, other):
        return self.graph.apply("matmul", other, self)

    @property
    def T(self):
        return self._ap("transpose")

    def sum(self, axis=None, keepdims=False):
        return self._ap("sum", axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self._ap("mean", axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self._ap("reshape", shape=tuple(shape))


class DiffGraph:
    """Ordered record of primitive applications and their values.

    Not thread-safe; build one graph per forward pass.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.values: list[np.ndarray] = []
        self.contexts: list = []
        self.leaves: dict[str, int] = {}

    def __len__(self):
        return len(self.records)

    def _push(self, record, value, ctx=None) -> Var:
        self.records.append(record)
        self.values.append(value)
        self.contexts.append(ctx)
        return Var(self, len(self.records) - 1)

    def leaf(self, value, name: str | None = None, trainable: bool = True) -> Var:
        if name is not None:
            if name in self.leaves:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.leaves[name] = len(self.records)
        rec = _Record(None, name=name, trainable=trainable, needs_grad=trainable)
        return self._push(rec, as_tensor(value))

    def constant(self, value) -> Var:
        return self.leaf(value, trainable=False)

    def apply(self, op: str, *inputs, **attrs) -> Var:
        prim = PRIMITIVES[op]
        slots = []
        for x in inputs:
            if isinstance(x, Var):
                if x.graph is not self:
                    raise ValueError("operand belongs to a different graph")
                slots.append(x.slot)
            else:
                slots.append(self.constant(x).slot)
        out, ctx = prim.forward(*(self.values[s] for s in slots), **attrs)
        needs = any(self.records[s].needs_grad for s in slots)
        rec = _Record(op, tuple(slots), attrs, needs_grad=needs)
        return self._push(rec, out, ctx)

    def context(self, var: Var):
        """Forward-pass side information recorded by the primitive."""
        return self.contexts[var.slot]

    def replay(self, leaves: Mapping[str, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-execute the record and return fresh values for every slot.

        Named leaves listed in `leaves` are substituted; every other leaf
        keeps its recorded value. The graph itself is not modified.
        """
        leaves = dict(leaves or {})
        values: list[np.ndarray] = []
        for i, rec in enumerate(self.records):
            if rec.op is None:
                if rec.name is not None and rec.name in leaves:
                    values.append(as_tensor(leaves.pop(rec.name)))
                else:
                    values.append(self.values[i])
                continue
            out, _ = PRIMITIVES[rec.op].forward(
                *(values[s] for s in rec.inputs), **rec.attrs)
            values.append(out)
        if leaves:
            raise KeyError(f"unknown leaves: {sorted(leaves)}")
        return values


def reverse_grad(graph: DiffGraph, loss) -> dict[str, np.ndarray]:
    """Gradient of a scalar slot with respect to every trainable named leaf.

    Contributions over fan-out are summed. Trainable leaves that the loss does
    not depend on get a zero gradient.
    """
    slot = loss.slot if isinstance(loss, Var) else int(loss)
    if isinstance(loss, Var) and loss.graph is not graph:
        raise GradientError("loss slot belongs to a different graph")
    if not 0 <= slot < len(graph.records):
        raise GradientError(f"slot {slot} is not in the graph")
    if graph.values[slot].size != 1:
        raise GradientError(
            f"loss must be scalar, got shape {graph.values[slot].shape}")

    grads: list[np.ndarray | None] = [None] * (slot + 1)
    grads[slot] = np.ones_like(graph.values[slot])
    for i in range(slot, -1, -1):
        g = grads[i]
        rec = graph.records[i]
        if g is None or rec.op is None or not rec.needs_grad:
            continue
        ins = [graph.values[s] for s in rec.inputs]
        in_grads = PRIMITIVES[rec.op].backward(
            g, graph.contexts[i], ins, graph.values[i], **rec.attrs)
        for s, gi in zip(rec.inputs, in_grads):
            if gi is None or not graph.records[s].needs_grad:
                continue
            grads[s] = gi if grads[s] is None else grads[s] + gi
        grads[i] = None

    out = {}
    for name, s in graph.leaves.items():
        if not graph.records[s].trainable:
            continue
        g = grads[s] if s <= slot else None
        out[name] = np.zeros_like(graph.values[s]) if g is None else np.asarray(g)
    return out


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_err: float
    passed: bool
    worst: tuple[str, tuple] | None
    n_checked: int
    per_param: dict[str, float] = field(default_factory=dict)


def finite_diff_check(
    f: Callable[[DiffGraph, dict[str, Var]], Var],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> FiniteDiffReport:
    """Compare reverse-mode gradients of `f` with central differences.

    `f` receives a fresh graph and a dict of leaf handles (one per entry of
    `params`) and returns the scalar loss handle. Relative error per
    coordinate is ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    params = {k: as_tensor(v) for k, v in params.items()}

    def evaluate(values):
        g = DiffGraph()
        leaves = {k: g.leaf(v, name=k) for k, v in values.items()}
        out = f(g, leaves)
        return g, leaves, out

    g, _, loss = evaluate(params)
    ad = reverse_grad(g, loss)
    base = float(loss.value.reshape(()))
    if not math.isfinite(base):
        raise GradientError("f is non-finite at the base point")

    worst_err, worst_at, n_checked = 0.0, None, 0
    per_param = {}
    for name, theta in params.items():
        p_err = 0.0
        for idx in np.ndindex(theta.shape):
            probe = dict(params)
            vals = []
            for sign in (1.0, -1.0):
                moved = theta.copy()
                moved[idx] += sign * eps
                probe[name] = moved
                v = float(evaluate(probe)[2].value.reshape(()))
                if not math.isfinite(v):
                    raise GradientError(f"f is non-finite at probe {name}{list(idx)}")
                vals.append(v)
            fd = (vals[0] - vals[1]) / (2.0 * eps)
            a = float(ad[name][idx])
            err = abs(a - fd) / max(1e-8, abs(a) + abs(fd))
            n_checked += 1
            p_err = max(p_err, err)
            if err > worst_err or worst_at is None:
                worst_err, worst_at = max(err, worst_err), (name, idx)
        per_param[name] = p_err
    return FiniteDiffReport(worst_err, worst_err <= tol, worst_at, n_checked, per_param)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    """Moment accumulators for Adam with coupled (L2) weight decay."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-5
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        state.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        return state


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> tuple[dict, AdamState]:
    """One Adam update. Returns new parameter dict and new state; inputs untouched."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("params, grads and optimizer state name different tensors")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k, theta in params.items():
        g = grads[k]
        if g.shape != theta.shape or state.m[k].shape != theta.shape:
            raise ShapeError(
                f"{k}: param {theta.shape}, grad {g.shape}, state {state.m[k].shape}")
        if state.weight_decay:
            g = g + state.weight_decay * theta
        m = state.m[k] * b1
        m += (1.0 - b1) * g
        v = state.v[k] * b2
        g = g * g
        g *= 1.0 - b2
        v += g
        denom = v / c2
        np.sqrt(denom, out=denom)
        denom += state.eps
        step = m / c1
        step /= denom
        step *= state.lr
        new_params[k] = theta - step
        new_m[k], new_v[k] = m, v
    new_state = AdamState(state.lr, b1, b2, state.eps, state.weight_decay, t, new_m, new_v)
    return new_params, new_state
