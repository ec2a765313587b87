"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run tape: while a ``Tape`` is active, every operation on a
``DiffArray`` records one node (op kind, parent ids, a vjp closure over the
saved forward values). ``tape_backward`` replays the nodes in reverse order
exactly once. Without an active tape the same ops run as plain numpy, which
is what finite-difference probes and evaluation code use.

Kink convention: ``abs``/``maximum``/``minimum``/max-reduce propagate zero
gradient exactly at ties and kinks. Finite-difference tests must avoid kink
points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tape", "DiffArray", "Param", "GradientMap", "AdamState", "Adam",
    "tape_backward", "adam_step", "finite_diff_check", "asdiff", "value",
]

_ACTIVE_TAPE: "Tape | None" = None


class Node:
    """One tape entry: op kind, parent node ids, vjp over saved values."""

    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: tuple, vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Recording context. Built per training step and discarded afterwards."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_leaves: dict[int, int] = {}  # id(Param) -> node id

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, op: str, parents: tuple, vjp: Callable) -> int:
        self.nodes.append(Node(op, parents, vjp))
        return len(self.nodes) - 1

    def leaf(self, param: "Param") -> "DiffArray":
        nid = self._param_leaves.get(id(param))
        if nid is None:
            nid = self.record("leaf", (), None)
            self._param_leaves[id(param)] = nid
        return DiffArray(param.value, nid)


class _Arith:
    """Operator sugar shared by DiffArray and Param."""

    __slots__ = ()

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class DiffArray(_Arith):
    """A float64 ndarray plus an optional handle into the active tape."""

    __slots__ = ("value", "node")

    def __init__(self, value, node: int | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.node = node

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = "const" if self.node is None else f"node={self.node}"
        return f"DiffArray(shape={self.value.shape}, {tag})"


class Param(_Arith):
    """Named persistent parameter. Lives across tapes as a plain ndarray;
    the first op touching it on a tape registers a leaf node."""

    __slots__ = ("value", "name")

    def __init__(self, value, name: str = ""):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def asdiff(x) -> DiffArray:
    """Wrap anything into a DiffArray (Params become tape leaves)."""
    if isinstance(x, DiffArray):
        return x
    if isinstance(x, Param):
        if _ACTIVE_TAPE is not None:
            return _ACTIVE_TAPE.leaf(x)
        return DiffArray(x.value, None)
    return DiffArray(x, None)


def value(x) -> np.ndarray:
    if isinstance(x, DiffArray):
        return x.value
    if isinstance(x, Param):
        return x.value
    return np.asarray(x, dtype=np.float64)


def detach(x) -> DiffArray:
    return DiffArray(value(x), None)


def _record(op: str, out_value: np.ndarray, inputs: Sequence[DiffArray],
            vjp: Callable) -> DiffArray:
    """Record a node if any input is on the tape; vjp(grad) returns one
    gradient (or None) per tracked input, in order."""
    tape = _ACTIVE_TAPE
    if tape is None:
        return DiffArray(out_value, None)
    parents = tuple(x.node for x in inputs if x.node is not None)
    if not parents:
        return DiffArray(out_value, None)
    tracked = tuple(x.node is not None for x in inputs)

    def dispatch(grad):
        grads = vjp(grad)
        out = []
        for g, t in zip(grads, tracked):
            if t:
                out.append(g)
        return out

    nid = tape.record(op, parents, dispatch)
    return DiffArray(out_value, nid)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = asdiff(a), asdiff(b)
    out = a.value + b.value
    return _record("add", out, (a, b), lambda g: (
        _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)))


def sub(a, b):
    a, b = asdiff(a), asdiff(b)
    out = a.value - b.value
    return _record("sub", out, (a, b), lambda g: (
        _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)))


def mul(a, b):
    a, b = asdiff(a), asdiff(b)
    out = a.value * b.value
    av, bv = a.value, b.value
    return _record("mul", out, (a, b), lambda g: (
        _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b = asdiff(a), asdiff(b)
    out = a.value / b.value
    av, bv = a.value, b.value
    return _record("div", out, (a, b), lambda g: (
        _unbroadcast(g / bv, av.shape),
        _unbroadcast(-g * av / (bv * bv), bv.shape)))


def neg(a):
    a = asdiff(a)
    return _record("neg", -a.value, (a,), lambda g: (-g,))


def power(a, p: float):
    a = asdiff(a)
    if isinstance(p, (DiffArray, Param)):
        raise TypeError("power only supports constant exponents")
    av = a.value
    out = av ** p
    return _record("pow", out, (a,), lambda g: (g * p * av ** (p - 1),))


def square(a):
    a = asdiff(a)
    av = a.value
    return _record("square", av * av, (a,), lambda g: (2.0 * av * g,))


def exp(a):
    a = asdiff(a)
    out = np.exp(a.value)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = asdiff(a)
    av = a.value
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    a = asdiff(a)
    out = np.sqrt(a.value)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sin(a):
    a = asdiff(a)
    av = a.value
    return _record("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    a = asdiff(a)
    av = a.value
    return _record("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def tanh(a):
    a = asdiff(a)
    out = np.tanh(a.value)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = asdiff(a)
    av = a.value
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ea = np.exp(av[~pos])
    out[~pos] = ea / (1.0 + ea)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a, beta: float = 1.0):
    """(1/beta) * log(1 + exp(beta*x)), linear above the overflow guard."""
    a = asdiff(a)
    z = beta * a.value
    out = np.where(z > 30.0, a.value, np.log1p(np.exp(np.minimum(z, 30.0))) / beta)
    sig = 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))
    return _record("softplus", out, (a,), lambda g: (g * sig,))


def relu(a):
    a = asdiff(a)
    av = a.value
    mask = av > 0
    return _record("relu", np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


def absolute(a):
    a = asdiff(a)
    s = np.sign(a.value)  # 0 at the kink
    return _record("abs", np.abs(a.value), (a,), lambda g: (g * s,))


def maximum(a, b):
    a, b = asdiff(a), asdiff(b)
    av, bv = a.value, b.value
    ma = av > bv
    mb = bv > av  # ties get zero on both sides
    return _record("maximum", np.maximum(av, bv), (a, b), lambda g: (
        _unbroadcast(g * ma, av.shape), _unbroadcast(g * mb, bv.shape)))


def minimum(a, b):
    a, b = asdiff(a), asdiff(b)
    av, bv = a.value, b.value
    ma = av < bv
    mb = bv < av
    return _record("minimum", np.minimum(av, bv), (a, b), lambda g: (
        _unbroadcast(g * ma, av.shape), _unbroadcast(g * mb, bv.shape)))


def clamp(a, lo=None, hi=None):
    out = asdiff(a)
    if lo is not None:
        out = maximum(out, lo)
    if hi is not None:
        out = minimum(out, hi)
    return out


def where(cond, a, b):
    """cond is a plain boolean mask (never differentiated)."""
    cond = np.asarray(cond, dtype=bool)
    a, b = asdiff(a), asdiff(b)
    out = np.where(cond, a.value, b.value)
    return _record("where", out, (a, b), lambda g: (
        _unbroadcast(g * cond, a.value.shape),
        _unbroadcast(g * ~cond, b.value.shape)))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def summation(a, axis=None, keepdims: bool = False):
    a = asdiff(a)
    av = a.value
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False):
    a = asdiff(a)
    n = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(summation(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def _extreme_reduce(a, axis, keepdims, fn, op):
    a = asdiff(a)
    av = a.value
    out = fn(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        ob = out
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            ob = np.expand_dims(out, axis)
        hit = av == ob
        count = hit.sum(axis=axis, keepdims=True) if axis is not None else hit.sum()
        # unique extremum gets the full gradient, ties get zero (kink rule)
        scale = np.where(count == 1, 1.0, 0.0)
        return (g * hit * scale,)

    return _record(op, out, (a,), vjp)


def max_reduce(a, axis=None, keepdims: bool = False):
    return _extreme_reduce(a, axis, keepdims, np.max, "max")


def min_reduce(a, axis=None, keepdims: bool = False):
    return _extreme_reduce(a, axis, keepdims, np.min, "min")


# ---------------------------------------------------------------------------
# shape / indexing / linear algebra
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = asdiff(a)
    old = a.value.shape
    return _record("reshape", a.value.reshape(shape), (a,),
                   lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = asdiff(a)
    out = np.transpose(a.value, axes)
    inv = None if axes is None else np.argsort(axes)
    return _record("transpose", out, (a,),
                   lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    """Basic and integer-array indexing. Backward scatters with np.add.at."""
    a = asdiff(a)
    out = a.value[idx]
    shape = a.value.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return (full,)

    return _record("getitem", np.array(out, copy=True), (a,), vjp)


def take(a, indices, axis: int = 0):
    a = asdiff(a)
    indices = np.asarray(indices)
    out = np.take(a.value, indices, axis=axis)
    shape = a.value.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        if axis == 0 and indices.ndim == 1 and len(shape) == 2 and shape[1] <= 8:
            # scatter-add via bincount, much faster than np.add.at for the
            # few-column case (hash-grid feature tables)
            for c in range(shape[1]):
                full[:, c] = np.bincount(indices, weights=g[:, c],
                                         minlength=shape[0])
        elif axis == 0:
            np.add.at(full, indices, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _record("take", out, (a,), vjp)


def concat(arrays: Iterable, axis: int = 0):
    arrays = [asdiff(x) for x in arrays]
    out = np.concatenate([x.value for x in arrays], axis=axis)
    sizes = [x.value.shape[axis] for x in arrays]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(arrays), vjp)


def stack(arrays: Iterable, axis: int = 0):
    arrays = [asdiff(x) for x in arrays]
    out = np.stack([x.value for x in arrays], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record("stack", out, tuple(arrays), vjp)


def matmul(a, b):
    """2-D or batched matmul with broadcasting over leading axes."""
    a, b = asdiff(a), asdiff(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul requires ndim >= 2 operands")
    out = av @ bv

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return _record("matmul", out, (a, b), vjp)


def cumprod(a, axis: int = -1):
    """Cumulative product; backward assumes inputs bounded away from zero."""
    a = asdiff(a)
    av = a.value
    out = np.cumprod(av, axis=axis)

    def vjp(g):
        gy = g * out
        rev = np.flip(np.cumsum(np.flip(gy, axis=axis), axis=axis), axis=axis)
        safe = np.where(np.abs(av) < 1e-300, 1e-300, av)
        return (rev / safe,)

    return _record("cumprod", out, (a,), vjp)


def custom(op: str, inputs: Sequence, out_value: np.ndarray, vjp: Callable):
    """Register a hand-written op. vjp(grad_out) must return one gradient
    (or None) per input, in order."""
    inputs = [asdiff(x) for x in inputs]
    return _record(op, np.asarray(out_value, dtype=np.float64), inputs, vjp)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

class GradientMap:
    """Gradients keyed by node id, with Param lookup through the tape."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads
        self.detached_queries = 0

    def by_node(self, node_id: int) -> np.ndarray | None:
        return self._grads[node_id]

    def get(self, x) -> np.ndarray:
        """Gradient for a DiffArray or Param; zeros (and a flag) if the
        value never reached the tape."""
        if isinstance(x, Param):
            nid = self._tape._param_leaves.get(id(x))
            if nid is None:
                self.detached_queries += 1
                return np.zeros_like(x.value)
            g = self._grads[nid]
            return np.zeros_like(x.value) if g is None else g
        if isinstance(x, DiffArray):
            if x.node is None:
                self.detached_queries += 1
                return np.zeros_like(x.value)
            g = self._grads[x.node]
            return np.zeros_like(x.value) if g is None else g
        raise TypeError(f"cannot look up gradient for {type(x)}")


def tape_backward(root: DiffArray) -> GradientMap:
    """Reverse sweep from a scalar root; returns d(root)/d(node) for every
    node reachable on the active tape."""
    tape = _ACTIVE_TAPE
    if tape is None:
        raise RuntimeError("tape_backward requires an active Tape")
    if root.node is None:
        raise ValueError("root is not on the tape")
    if root.value.size != 1:
        raise ValueError(f"root must be scalar, got shape {root.value.shape}")

    grads: list = [None] * len(tape.nodes)
    grads[root.node] = np.ones_like(root.value)
    for nid in range(root.node, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.vjp is None:  # leaf
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            if grads[pid] is None:
                grads[pid] = pg
            else:
                grads[pid] = grads[pid] + pg
    return GradientMap(tape, grads)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam accumulators for one parameter group."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)  # id(Param) -> ndarray
    v: dict = field(default_factory=dict)

    def moments(self, p: Param):
        k = id(p)
        if k not in self.m:
            self.m[k] = np.zeros_like(p.value)
            self.v[k] = np.zeros_like(p.value)
        return self.m[k], self.v[k]

    def remap(self, p: Param, fn: Callable[[np.ndarray], np.ndarray]):
        """Apply an index remapping (e.g. after densification) to both
        accumulators of p, keeping them shape-aligned with p.value."""
        k = id(p)
        if k in self.m:
            self.m[k] = fn(self.m[k])
            self.v[k] = fn(self.v[k])


def adam_step(params: Sequence[Param], grads: GradientMap, state: AdamState):
    """One bias-corrected Adam update, in place, for all params."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = grads.get(p)
        if g.shape != p.value.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match param {p.name!r} "
                f"shape {p.value.shape}")
        m, v = state.moments(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Convenience wrapper holding one AdamState per (params, lr) group."""

    def __init__(self, groups: Sequence[tuple[Sequence[Param], float]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = [(list(ps), AdamState(lr=lr, beta1=beta1, beta2=beta2,
                                            eps=eps))
                       for ps, lr in groups]

    def step(self, grads: GradientMap):
        for params, state in self.groups:
            adam_step(params, grads, state)

    @property
    def params(self) -> list[Param]:
        return [p for ps, _ in self.groups for p in ps]


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[], DiffArray], params: Sequence[Param],
                      h: float = 1e-5, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max over sampled coordinates of |g_ad - g_fd| / max(1, |g_fd|).

    f() must rebuild its computation from the current param values; it is
    called once on a fresh tape for the AD gradient and twice per probed
    coordinate (no tape) for central differences.
    """
    with Tape():
        out = f()
        if out.value.size != 1:
            raise ValueError("finite_diff_check needs a scalar objective")
        grads = tape_backward(out)
        ad = [grads.get(p).ravel().copy() for p in params]

    worst = 0.0
    for p, gad in zip(params, ad):
        flat = p.value.ravel()
        idxs = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            r = rng if rng is not None else np.random.default_rng(0)
            idxs = r.choice(flat.size, size=max_coords, replace=False)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + h
            fp = float(value(f()))
            flat[i] = keep - h
            fm = float(value(f()))
            flat[i] = keep
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(
                    f"non-finite objective at param {p.name!r} coord {i}")
            gfd = (fp - fm) / (2.0 * h)
            err = abs(gad[i] - gfd) / max(1.0, abs(gfd))
            worst = max(worst, err)
    return worst
