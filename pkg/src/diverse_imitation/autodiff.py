"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive is polymorphic: called on plain arrays it just computes the
value; called with at least one :class:`Var` it records a node.  Backward rules
are written with the same primitives, so running the backward pass with
``create_graph=True`` records a differentiable graph of the gradient itself,
which is what Hessian-vector (Fisher-vector) products need.

Elementwise binary ops require identical shapes.  Python scalars are accepted
as constants; anything else must be expanded explicitly with :func:`expand`.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Var", "ShapeError", "NumericalError", "ParamVector",
    "value_and_grad", "grad", "check_gradient", "value_of",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "permute", "reshape",
    "tanh", "sigmoid", "exp", "log", "softplus", "square", "sum", "mean",
    "concat", "index", "scatter", "expand", "sum_to", "maximum", "amax",
    "stop_gradient", "log_sigmoid", "logsumexp", "gaussian_log_prob",
    "primitive",
]

_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values it must not."""


class Var:
    """A node on the tape: a value plus how to pull gradients to its parents."""

    __slots__ = ("value", "parents", "vjp", "op", "order")
    __array_priority__ = 1000

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.order = next(_counter)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


def value_of(x):
    """Underlying numpy value of a Var, array, or scalar."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64) if not isinstance(x, float) else x


def _any_var(*xs):
    return any(isinstance(x, Var) for x in xs)


def primitive(op: str, value, parents: tuple, vjp: Callable) -> Var:
    """Record a node.  ``vjp(g, *parents, out)`` returns one gradient per parent.

    In first-order mode the vjp receives numpy values; in create_graph mode it
    receives the parent Vars and the output Var.  Return ``None`` for parents
    that need no gradient.
    """
    return Var(value, parents, vjp, op)


# ---------------------------------------------------------------- elementwise

def _is_const_scalar(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _check_same(op, a, b):
    if _is_const_scalar(a) or _is_const_scalar(b):
        return
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))
    if sa != sb:
        raise ShapeError(f"{op}: operand shapes {sa} and {sb} differ (use expand)")


def _unscalar(g, x):
    # gradient w.r.t. a python-scalar constant is never needed
    return None if _is_const_scalar(x) else g


def add(a, b):
    _check_same("add", a, b)
    if not _any_var(a, b):
        return value_of(a) + value_of(b)
    return primitive("add", value_of(a) + value_of(b), (a, b),
                     lambda g, a, b, out: (_unscalar(g, a), _unscalar(g, b)))


def sub(a, b):
    _check_same("sub", a, b)
    if not _any_var(a, b):
        return value_of(a) - value_of(b)
    return primitive("sub", value_of(a) - value_of(b), (a, b),
                     lambda g, a, b, out: (_unscalar(g, a), _unscalar(neg(g), b)))


def neg(a):
    if not isinstance(a, Var):
        return -value_of(a)
    return primitive("neg", -a.value, (a,), lambda g, a, out: (neg(g),))


def mul(a, b):
    _check_same("mul", a, b)
    if not _any_var(a, b):
        return value_of(a) * value_of(b)

    def vjp(g, a, b, out):
        ga = None if _is_const_scalar(a) or not _needs(a) else mul(g, b)
        gb = None if _is_const_scalar(b) or not _needs(b) else mul(g, a)
        return ga, gb
    return primitive("mul", value_of(a) * value_of(b), (a, b), vjp)


def div(a, b):
    _check_same("div", a, b)
    if not _any_var(a, b):
        return value_of(a) / value_of(b)

    def vjp(g, a, b, out):
        ga = None if _is_const_scalar(a) or not _needs(a) else div(g, b)
        gb = None if _is_const_scalar(b) or not _needs(b) else neg(div(mul(g, out), b))
        return ga, gb
    return primitive("div", value_of(a) / value_of(b), (a, b), vjp)


# In first-order backward the vjp sees plain arrays for both Var parents and
# constants; grad() records which argument objects came from Vars so rules can
# skip work for constants.
_state = threading.local()


def _needs(x):
    return isinstance(x, Var) or id(x) in getattr(_state, "needs", ())


def square(a):
    return mul(a, a)


def tanh(x):
    if not isinstance(x, Var):
        return np.tanh(value_of(x))
    return primitive("tanh", np.tanh(x.value), (x,),
                     lambda g, x, out: (mul(g, sub(1.0, mul(out, out))),))


def sigmoid(x):
    if not isinstance(x, Var):
        return expit(value_of(x))
    return primitive("sigmoid", expit(x.value), (x,),
                     lambda g, x, out: (mul(g, mul(out, sub(1.0, out))),))


def exp(x):
    if not isinstance(x, Var):
        return np.exp(value_of(x))
    return primitive("exp", np.exp(x.value), (x,), lambda g, x, out: (mul(g, out),))


def log(x):
    if not isinstance(x, Var):
        return np.log(value_of(x))
    return primitive("log", np.log(x.value), (x,), lambda g, x, out: (div(g, x),))


def _softplus_np(x):
    return np.logaddexp(0.0, x)


def softplus(x):
    """log(1 + exp(x)), overflow-safe."""
    if not isinstance(x, Var):
        return _softplus_np(value_of(x))
    return primitive("softplus", _softplus_np(x.value), (x,),
                     lambda g, x, out: (mul(g, sigmoid(x)),))


def log_sigmoid(x):
    return neg(softplus(neg(x)))


def maximum(a, b):
    """Elementwise max; ties send the gradient to the first operand."""
    _check_same("maximum", a, b)
    va, vb = value_of(a), value_of(b)
    if not _any_var(a, b):
        return np.maximum(va, vb)
    mask = np.asarray(va >= vb, dtype=np.float64)
    if np.ndim(mask) == 0:
        mask = float(mask)

    def vjp(g, a, b, out):
        ga = None if _is_const_scalar(a) else mul(g, mask)
        gb = None if _is_const_scalar(b) else mul(g, 1.0 - mask)
        return ga, gb
    return primitive("maximum", np.maximum(va, vb), (a, b), vjp)


def stop_gradient(x):
    return value_of(x).copy() if isinstance(x, Var) else value_of(x)


# ------------------------------------------------------------------ linalg

def matmul(a, b):
    va, vb = value_of(a), value_of(b)
    if np.ndim(va) != 2 or np.ndim(vb) != 2 or va.shape[1] != vb.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {np.shape(va)} by {np.shape(vb)}")
    if not _any_var(a, b):
        return va @ vb

    def vjp(g, a, b, out):
        ga = matmul(g, transpose(b)) if _needs(a) else None
        gb = matmul(transpose(a), g) if _needs(b) else None
        return ga, gb
    return primitive("matmul", va @ vb, (a, b), vjp)


def transpose(x):
    v = value_of(x)
    if np.ndim(v) != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {np.shape(v)}")
    if not isinstance(x, Var):
        return v.T
    return primitive("transpose", v.T, (x,), lambda g, x, out: (transpose(g),))


def permute(x, axes):
    """Reorder axes (numpy ``transpose`` with explicit axes)."""
    v = value_of(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(np.ndim(v))):
        raise ShapeError(f"permute: axes {axes} invalid for shape {np.shape(v)}")
    if not isinstance(x, Var):
        return np.transpose(v, axes)
    inv = tuple(np.argsort(axes))
    return primitive("permute", np.transpose(v, axes), (x,),
                     lambda g, x, out: (permute(g, inv),))


def reshape(x, shape):
    v = value_of(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != v.size:
        raise ShapeError(f"reshape: cannot reshape {v.shape} into {shape}")
    if not isinstance(x, Var):
        return v.reshape(shape)
    old = v.shape
    return primitive("reshape", v.reshape(shape), (x,),
                     lambda g, x, out: (reshape(g, old),))


# -------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    v = value_of(x)
    axes = _norm_axis(axis, np.ndim(v))
    if not isinstance(x, Var):
        return np.sum(v, axis=axes, keepdims=keepdims)
    in_shape = v.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(in_shape))

    def vjp(g, x, out):
        return (expand(reshape(g, kept), in_shape),)
    return primitive("sum", np.sum(v, axis=axes, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims=False):
    v = value_of(x)
    axes = _norm_axis(axis, np.ndim(v))
    count = int(np.prod([np.shape(v)[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def amax(x, axis=None, keepdims=False):
    """Max reduction; the gradient is split evenly among tied maxima."""
    v = value_of(x)
    axes = _norm_axis(axis, np.ndim(v))
    if v.size == 0 or any(v.shape[a] == 0 for a in axes):
        raise ShapeError("amax: empty reduction axis")
    m = np.max(v, axis=axes, keepdims=True)
    if not isinstance(x, Var):
        return m if keepdims else np.squeeze(m, axis=axes)
    mask = (v == m).astype(np.float64)
    mask /= np.sum(mask, axis=axes, keepdims=True)
    kept = m.shape

    def vjp(g, x, out):
        return (mul(expand(reshape(g, kept), v.shape), mask),)
    return primitive("amax", m if keepdims else np.squeeze(m, axis=axes), (x,), vjp)


def expand(x, shape):
    """Rank-matching broadcast: every source extent is 1 or equals the target."""
    v = value_of(x)
    shape = tuple(shape)
    if np.ndim(v) != len(shape) or any(s not in (1, t) for s, t in zip(np.shape(v), shape)):
        raise ShapeError(f"expand: cannot expand {np.shape(v)} to {shape}")
    if not isinstance(x, Var):
        return np.broadcast_to(v, shape).copy()
    src = v.shape
    return primitive("expand", np.broadcast_to(v, shape).copy(), (x,),
                     lambda g, x, out: (sum_to(g, src),))


def sum_to(x, shape):
    """Adjoint of :func:`expand`: sum over the axes that were broadcast."""
    v = value_of(x)
    shape = tuple(shape)
    axes = tuple(i for i, (s, t) in enumerate(zip(shape, np.shape(v))) if s == 1 and t != 1)
    if not isinstance(x, Var):
        return np.sum(v, axis=axes, keepdims=True) if axes else v
    src = v.shape
    return primitive("sum_to", np.sum(v, axis=axes, keepdims=True) if axes else v, (x,),
                     lambda g, x, out: (expand(g, src),))


# ---------------------------------------------------------- structural ops

def concat(xs: Sequence, axis=0):
    vals = [value_of(x) for x in xs]
    if not vals:
        raise ShapeError("concat: nothing to concatenate")
    nd = np.ndim(vals[0])
    ax = axis % nd
    for v in vals:
        if np.ndim(v) != nd or any(np.shape(v)[i] != np.shape(vals[0])[i]
                                   for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[np.shape(u) for u in vals]}")
    out = np.concatenate(vals, axis=ax)
    if not _any_var(*xs):
        return out
    bounds = np.cumsum([0] + [np.shape(v)[ax] for v in vals])

    def vjp(g, *args):
        parts = []
        for i in range(len(vals)):
            key = [slice(None)] * nd
            key[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            parts.append(index(g, tuple(key)))
        return tuple(parts)
    return primitive("concat", out, tuple(xs), vjp)


def index(x, key):
    """Basic (slice/integer) indexing."""
    v = value_of(x)
    if not isinstance(x, Var):
        return v[key]
    shape = v.shape
    return primitive("index", v[key], (x,),
                     lambda g, x, out: (scatter(g, key, shape),))


def scatter(x, key, shape):
    """Zero array of ``shape`` with ``x`` written at ``key``; adjoint of index."""
    v = value_of(x)
    out = np.zeros(shape)
    out[key] = v
    if not isinstance(x, Var):
        return out
    return primitive("scatter", out, (x,), lambda g, x, out_: (index(g, key),))


# ------------------------------------------------------- numerical helpers

def logsumexp(v, axis=-1, keepdims=False):
    """log(sum(exp(v))) along ``axis`` with a max shift."""
    val = value_of(v)
    axes = _norm_axis(axis, np.ndim(val))
    if any(np.shape(val)[a] == 0 for a in axes):
        raise ShapeError("logsumexp: empty axis")
    m = np.max(val, axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = sub(v, np.broadcast_to(m, np.shape(val)).copy())
    s = log(sum(exp(shifted), axis=axes, keepdims=True))
    out = add(s, m)
    if keepdims:
        return out
    return reshape(out, tuple(n for i, n in enumerate(np.shape(val)) if i not in axes))


_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def gaussian_log_prob(x, mean, log_std, axis=None):
    """Diagonal Gaussian log-density summed over ``axis`` (all axes by default)."""
    _check_same("gaussian_log_prob", x, mean)
    _check_same("gaussian_log_prob", x, log_std)
    z = div(sub(x, mean), exp(log_std))
    per = sub(sub(neg(log_std), _HALF_LOG_2PI), mul(0.5, mul(z, z)))
    return sum(per, axis=axis)


# ----------------------------------------------------------------- backward

def _topo(root: Var) -> list[Var]:
    seen, stack, nodes = set(), [root], []
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        nodes.append(n)
        for p in n.parents:
            if isinstance(p, Var) and id(p) not in seen:
                stack.append(p)
    nodes.sort(key=lambda n: n.order, reverse=True)
    return nodes


def grad(y: Var, xs: Sequence[Var], create_graph: bool = False, seed=None):
    """Gradients of scalar ``y`` (or ``seed``-weighted ``y``) w.r.t. ``xs``.

    Returns a list aligned with ``xs``; unreachable inputs get zeros (or a
    constant zero array when ``create_graph``).
    """
    if not isinstance(y, Var):
        return [np.zeros_like(value_of(x)) for x in xs]
    if seed is None:
        if y.value.size != 1:
            raise ShapeError(f"grad: output must be scalar, got shape {y.shape}")
        seed = np.ones_like(y.value)
    adj: dict[int, object] = {id(y): seed}
    for node in _topo(y):
        g = adj.pop(id(node), None)
        if g is None or node.vjp is None:
            if g is not None:
                adj[id(node)] = g
            continue
        if create_graph:
            args = node.parents + (node,)
        else:
            args = tuple(p.value if isinstance(p, Var) else p for p in node.parents) + (node.value,)
            _state.needs = {id(a) for a, p in zip(args, node.parents) if isinstance(p, Var)}
            if not isinstance(g, np.ndarray):
                g = np.asarray(value_of(g))
        try:
            pgs = node.vjp(g, *args)
        except ShapeError as err:
            raise ShapeError(f"backward through node '{node.op}': {err}") from err
        finally:
            _state.needs = ()
        for p, pg in zip(node.parents, pgs):
            if pg is None or not isinstance(p, Var):
                continue
            k = id(p)
            if k in adj:
                adj[k] = add(adj[k], pg)
            else:
                adj[k] = pg
    out = []
    for x in xs:
        g = adj.get(id(x))
        if g is None:
            g = np.zeros_like(x.value)
        elif not create_graph:
            g = np.asarray(value_of(g), dtype=np.float64)
        out.append(g)
    return out


# --------------------------------------------------------------- parameters

@dataclass
class ParamVector:
    """Named parameter blocks stored in one flat float64 array."""

    names: list[str]
    shapes: list[tuple[int, ...]]
    data: np.ndarray
    offsets: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("ParamVector: duplicate parameter names")
        self.shapes = [tuple(int(n) for n in s) for s in self.shapes]
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = [int(o) for o in np.cumsum([0] + sizes[:-1])] if sizes else []
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 1 or self.data.size != int(np.sum(sizes)):
            raise ShapeError(f"ParamVector: data of length {self.data.size} does not "
                             f"cover {int(np.sum(sizes))} parameters")

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        names = list(arrays)
        shapes = [np.shape(arrays[n]) for n in names]
        data = np.concatenate([np.ravel(arrays[n]).astype(np.float64) for n in names]) \
            if names else np.zeros(0)
        return cls(names, shapes, data)

    @classmethod
    def concat(cls, parts: Mapping[str, "ParamVector"]) -> "ParamVector":
        names, shapes, datas = [], [], []
        for prefix, pv in parts.items():
            names += [f"{prefix}/{n}" for n in pv.names]
            shapes += pv.shapes
            datas.append(pv.data)
        return cls(names, shapes, np.concatenate(datas) if datas else np.zeros(0))

    def split(self, prefixes: Iterable[str]) -> dict[str, "ParamVector"]:
        out = {}
        for prefix in prefixes:
            tag = prefix + "/"
            arrs = {n[len(tag):]: self[n] for n in self.names if n.startswith(tag)}
            out[prefix] = ParamVector.from_arrays(arrs)
        return out

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.names

    def __getitem__(self, name: str) -> np.ndarray:
        i = self.names.index(name)
        size = int(np.prod(self.shapes[i]))
        return self.data[self.offsets[i]:self.offsets[i] + size].reshape(self.shapes[i])

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: self[n] for n in self.names}

    def leaves(self) -> dict[str, Var]:
        return {n: Var(self[n].copy()) for n in self.names}

    def with_data(self, data: np.ndarray) -> "ParamVector":
        return ParamVector(list(self.names), list(self.shapes), np.array(data, dtype=np.float64))

    def copy(self) -> "ParamVector":
        return self.with_data(self.data.copy())

    def zeros_like(self) -> "ParamVector":
        return self.with_data(np.zeros_like(self.data))

    def flatten_grads(self, grads: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.ravel(grads[n]) for n in self.names]) if self.names \
            else np.zeros(0)


def value_and_grad(f: Callable[[Mapping], object], p: ParamVector):
    """Evaluate scalar ``f`` on the parameter blocks and return (value, gradient)."""
    leaves = p.leaves()
    y = f(leaves)
    yv = value_of(y)
    if np.size(yv) != 1:
        raise ShapeError(f"value_and_grad: f must return a scalar, got shape {np.shape(yv)}")
    gs = grad(y, [leaves[n] for n in p.names])
    flat = p.flatten_grads(dict(zip(p.names, gs)))
    return float(np.reshape(yv, ())), p.with_data(flat)


def check_gradient(f: Callable[[Mapping], object], p: ParamVector, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if step <= 0:
        raise ValueError("check_gradient: step must be positive")
    _, g = value_and_grad(f, p)
    analytic = g.data
    worst = 0.0
    for i in range(p.size):
        vals = []
        for s in (step, -step):
            q = p.copy()
            q.data[i] += s
            fv = float(np.reshape(value_of(f(q.arrays())), ()))
            if not np.isfinite(fv):
                raise NumericalError(f"check_gradient: non-finite f at coordinate {i}")
            vals.append(fv)
        numeric = (vals[0] - vals[1]) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return float(worst)
