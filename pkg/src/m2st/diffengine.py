"""Small reverse-mode differentiation engine over numpy arrays.

Every primitive records a vector-Jacobian product written in terms of other
primitives, so a backward pass run with ``create_graph=True`` is itself
differentiable. That is what makes exact second-order meta-gradients possible
(an inner gradient step can sit on the tape of an outer objective).
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Var",
    "ParamVector",
    "NonFiniteError",
    "grad",
    "evaluate",
    "gradient",
    "finite_diff_check",
    "no_grad",
    "check_finite",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "exp",
    "log",
    "softplus",
    "sigmoid",
    "sqrt",
    "sqdist",
    "getitem",
    "softmax",
    "stack",
]


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or inf while finiteness checks are on."""

    def __init__(self, op: str, shape: tuple[int, ...]):
        super().__init__(f"non-finite value produced by node '{op}' (shape {shape})")
        self.op = op


class _Mode:
    record = True
    check = False


@contextlib.contextmanager
def no_grad():
    prev = _Mode.record
    _Mode.record = False
    try:
        yield
    finally:
        _Mode.record = prev


@contextlib.contextmanager
def _recording(flag: bool):
    prev = _Mode.record
    _Mode.record = flag
    try:
        yield
    finally:
        _Mode.record = prev


def is_recording() -> bool:
    return _Mode.record


@contextlib.contextmanager
def check_finite():
    """Raise NonFiniteError at the first primitive whose output is not finite."""
    prev = _Mode.check
    _Mode.check = True
    try:
        yield
    finally:
        _Mode.check = prev


class Var:
    __slots__ = ("value", "parents", "requires_grad", "op")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple = ()
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Var":
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def __float__(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Var(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Var":
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Var":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(value: np.ndarray, op: str, inputs: Sequence[tuple[Var, Callable[[Var], Var]]]) -> Var:
    if _Mode.check and not np.all(np.isfinite(value)):
        raise NonFiniteError(op, np.shape(value))
    out = Var(value, op=op)
    if _Mode.record:
        live = tuple((v, fn) for v, fn in inputs if v.requires_grad)
        if live:
            out.parents = live
            out.requires_grad = True
    return out


# -- broadcasting helpers ---------------------------------------------------

def _sum_to(g: Var, shape: tuple[int, ...]) -> Var:
    if g.shape == shape:
        return g
    return _sum_to_prim(g, shape)


def _sum_to_prim(g: Var, shape: tuple[int, ...]) -> Var:
    val = g.value
    lead = val.ndim - len(shape)
    if lead:
        val = val.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and val.shape[i] != 1)
    if axes:
        val = val.sum(axis=axes, keepdims=True)
    src = g.shape
    return _node(val.reshape(shape), "sum_to", [(g, lambda u: broadcast_to(u, src))])


def broadcast_to(a: Var, shape: tuple[int, ...]) -> Var:
    if a.shape == shape:
        return a
    src = a.shape
    return _node(np.broadcast_to(a.value, shape).copy(), "broadcast",
                 [(a, lambda u: _sum_to(u, src))])


# -- arithmetic -------------------------------------------------------------

def add(a, b) -> Var:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, "add",
                 [(a, lambda g: _sum_to(g, sa)), (b, lambda g: _sum_to(g, sb))])


def sub(a, b) -> Var:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, "sub",
                 [(a, lambda g: _sum_to(g, sa)), (b, lambda g: _sum_to(neg(g), sb))])


def neg(a) -> Var:
    a = constant(a)
    return _node(-a.value, "neg", [(a, lambda g: neg(g))])


def mul(a, b) -> Var:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _node(a.value * b.value, "mul",
                 [(a, lambda g: _sum_to(mul(g, b), sa)),
                  (b, lambda g: _sum_to(mul(g, a), sb))])


def div(a, b) -> Var:
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return _node(a.value / b.value, "div",
                 [(a, lambda g: _sum_to(div(g, b), sa)),
                  (b, lambda g: _sum_to(neg(div(mul(g, a), mul(b, b))), sb))])


def matmul(a, b) -> Var:
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    return _node(a.value @ b.value, "matmul",
                 [(a, lambda g: matmul(g, transpose(b))),
                  (b, lambda g: matmul(transpose(a), g))])


def transpose(a) -> Var:
    a = constant(a)
    return _node(a.value.T.copy(), "transpose", [(a, lambda g: transpose(g))])


def reshape(a, shape) -> Var:
    a = constant(a)
    src = a.shape
    return _node(a.value.reshape(shape), "reshape", [(a, lambda g: reshape(g, src))])


def sum(a, axis=None, keepdims: bool = False) -> Var:  # noqa: A001 - mirrors numpy
    a = constant(a)
    src = a.shape
    val = a.value.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        kept = (1,) * a.ndim
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
        kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def vjp(g: Var) -> Var:
        return broadcast_to(reshape(g, kept), src)

    return _node(np.asarray(val), "sum", [(a, vjp)])


def fsum(a) -> Var:
    """Full sum, correctly rounded (``math.fsum``); same gradient as ``sum``."""
    a = constant(a)
    src = a.shape
    val = math.fsum(a.value.ravel().tolist())
    return _node(np.asarray(val), "fsum", [(a, lambda g: broadcast_to(g, src))])


def xsum(a, axis=None) -> Var:
    """Sum accumulated in extended precision, rounded once to float64."""
    a = constant(a)
    val = np.asarray(a.value.astype(np.longdouble).sum(axis=axis), dtype=np.float64)
    src = a.shape
    if axis is None:
        kept = ()
    else:
        ax = axis % a.ndim
        kept = tuple(1 if i == ax else s for i, s in enumerate(src))

    def vjp(g: Var) -> Var:
        return broadcast_to(reshape(g, kept), src)

    return _node(val, "xsum", [(a, vjp)])


# -- elementwise nonlinearities ---------------------------------------------

def exp(a) -> Var:
    a = constant(a)
    out = _node(np.exp(a.value), "exp", [])
    if _Mode.record and a.requires_grad:
        out.parents = ((a, lambda g: mul(g, out)),)
        out.requires_grad = True
    return out


def log(a) -> Var:
    a = constant(a)
    return _node(np.log(a.value), "log", [(a, lambda g: div(g, a))])


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a) -> Var:
    a = constant(a)
    out = _node(_np_sigmoid(np.atleast_1d(a.value)).reshape(a.shape), "sigmoid", [])
    if _Mode.record and a.requires_grad:
        out.parents = ((a, lambda g: mul(g, mul(out, sub(1.0, out)))),)
        out.requires_grad = True
    return out


def softplus(a) -> Var:
    a = constant(a)
    x = a.value
    val = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _node(val, "softplus", [(a, lambda g: mul(g, sigmoid(a)))])


def sqrt(a) -> Var:
    a = constant(a)
    out = _node(np.sqrt(a.value), "sqrt", [])
    if _Mode.record and a.requires_grad:
        out.parents = ((a, lambda g: div(g, mul(2.0, out))),)
        out.requires_grad = True
    return out


# -- structural ---------------------------------------------------------------

def sqdist(x, y) -> Var:
    """Pairwise squared Euclidean distances between the rows of ``x`` and ``y``."""
    same = x is y
    x, y = constant(x), constant(y)
    xv, yv = x.value, y.value
    if xv.shape[1] <= 3 and xv.shape[0] * yv.shape[0] <= 250_000:
        diff = xv[:, None, :] - yv[None, :, :]
        val = np.einsum("ijk,ijk->ij", diff, diff)
    else:
        val = (xv * xv).sum(1)[:, None] + (yv * yv).sum(1)[None, :] - 2.0 * (xv @ yv.T)
        np.maximum(val, 0.0, out=val)
        if same:
            np.fill_diagonal(val, 0.0)

    def vjp_x(g: Var) -> Var:
        rows = reshape(sum(g, axis=1), (x.shape[0], 1))
        return mul(2.0, sub(mul(x, rows), matmul(g, y)))

    def vjp_y(g: Var) -> Var:
        cols = reshape(sum(g, axis=0), (y.shape[0], 1))
        return mul(2.0, sub(mul(y, cols), matmul(transpose(g), x)))

    return _node(val, "sqdist", [(x, vjp_x), (y, vjp_y)])


def getitem(a, idx) -> Var:
    a = constant(a)
    src = a.shape
    return _node(np.array(a.value[idx]), "getitem", [(a, lambda g: _scatter(g, idx, src))])


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer)) for p in parts)


def _scatter(g: Var, idx, shape: tuple[int, ...]) -> Var:
    val = np.zeros(shape)
    if _is_basic(idx):
        val[idx] = g.value
    else:
        np.add.at(val, idx, g.value)
    return _node(val, "scatter", [(g, lambda u: getitem(u, idx))])


def stack(parts: Sequence[Var]) -> Var:
    """Stack scalar Vars into a 1-D Var."""
    parts = [constant(p) for p in parts]
    val = np.array([float(p.value) for p in parts])
    inputs = [(p, (lambda i: lambda g: getitem(g, i))(i)) for i, p in enumerate(parts)]
    return _node(val, "stack", inputs)


def softmax(a) -> Var:
    a = constant(a)
    shifted = sub(a, float(np.max(a.value)))
    e = exp(shifted)
    return div(e, sum(e))


# -- backward ----------------------------------------------------------------

def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack_: list[tuple[Var, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack_.append((parent, False))
    return order


def grad(output: Var, wrt: Sequence[Var], create_graph: bool = False) -> list[Var]:
    """Gradients of a scalar ``output`` with respect to each Var in ``wrt``.

    With ``create_graph`` the returned gradients are themselves recorded and
    can be differentiated again.
    """
    if output.value.size != 1:
        raise ValueError("grad requires a scalar output")
    grads: dict[int, Var] = {id(output): Var(np.ones_like(output.value))}
    with _recording(create_graph):
        for node in reversed(_toposort(output)):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = contrib if prev is None else add(prev, contrib)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Var(np.zeros_like(w.value)))
    return out


# -- flat parameter vectors -----------------------------------------------------

@dataclass
class ParamVector:
    values: np.ndarray
    layout: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        self.layout = [(name, tuple(shape)) for name, shape in self.layout]
        if not self.layout:
            self.layout = [("theta", (self.values.size,))]
        names = [n for n, _ in self.layout]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate segment names in layout: {names}")
        total = int(np.sum([int(np.prod(s)) for _, s in self.layout]))
        if total != self.values.size:
            raise ValueError(f"layout covers {total} values but vector has {self.values.size}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains non-finite values")

    def __len__(self) -> int:
        return self.values.size

    def offsets(self) -> dict[str, tuple[int, int, tuple[int, ...]]]:
        out, start = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = (start, start + size, shape)
            start += size
        return out

    def unflatten(self, theta: Var | np.ndarray | None = None) -> dict[str, Var]:
        """Split a flat Var (default: these values) into named, shaped segments."""
        theta = constant(self.values if theta is None else theta)
        return {name: reshape(getitem(theta, slice(a, b)), shape)
                for name, (a, b, shape) in self.offsets().items()}

    def segment(self, name: str) -> np.ndarray:
        a, b, shape = self.offsets()[name]
        return self.values[a:b].reshape(shape)

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), list(self.layout))


Objective = Callable[[Var], Var]


def evaluate(objective: Objective, params: ParamVector | np.ndarray) -> float:
    """Forward value of ``objective`` with finiteness checked at every node."""
    values = params.values if isinstance(params, ParamVector) else np.asarray(params, float)
    if not np.all(np.isfinite(values)):
        raise ValueError("parameters must be finite")
    with no_grad(), check_finite(), np.errstate(all="ignore"):
        out = objective(Var(values))
    return float(out.value)


def gradient(objective: Objective, params: ParamVector | np.ndarray) -> np.ndarray:
    values = params.values if isinstance(params, ParamVector) else np.asarray(params, float)
    theta = Var(values.copy(), requires_grad=True)
    with _recording(True):
        out = objective(theta)
    (g,) = grad(out, [theta])
    return g.value.copy()


def value_and_gradient(objective: Objective, values: np.ndarray) -> tuple[float, np.ndarray]:
    theta = Var(np.array(values, dtype=np.float64), requires_grad=True)
    with _recording(True):
        out = objective(theta)
    (g,) = grad(out, [theta])
    return float(out.value), g.value.copy()


def finite_diff_check(objective: Objective, params: ParamVector | np.ndarray,
                      step: float = 1e-5,
                      analytic: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``analytic`` overrides the tape gradient (used to validate hand-coded gradients).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    values = params.values if isinstance(params, ParamVector) else np.asarray(params, float)
    values = np.array(values, dtype=np.float64)
    g = analytic(values) if analytic is not None else gradient(objective, values)
    worst = 0.0
    with no_grad():
        for i in range(values.size):
            up, down = values.copy(), values.copy()
            up[i] += step
            down[i] -= step
            fd = (float(objective(Var(up)).value) - float(objective(Var(down)).value)) / (2 * step)
            worst = max(worst, abs(g[i] - fd) / max(1.0, abs(g[i])))
    return worst


def tree_sum(parts: Iterable[Var]) -> Var:
    total = None
    for p in parts:
        total = p if total is None else add(total, p)
    if total is None:
        raise ValueError("empty sum")
    return total
