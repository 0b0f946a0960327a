"""Dense float64 tensors with a reverse-mode tape.

A :class:`Graph` records every primitive applied during a forward pass as an
append-only list of nodes. Because inputs always precede outputs, walking the
list backwards is a valid topological order and :func:`backward` visits each
node once.

Typical use::

    g = Graph(seed=0)
    w = g.param(np.ones((3, 2)))
    x = g.const(data)
    loss = ops.sum(ops.mul(x @ w, x @ w))
    grads = backward(loss)
    grads[w]
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

EPS = 1e-12

__all__ = [
    "EPS",
    "DiffcoreError",
    "ShapeError",
    "ZeroNormError",
    "Graph",
    "Tensor",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "reshape",
    "exp",
    "log",
    "negate",
    "sum",
    "broadcast_to",
    "row_softmax",
    "l2_normalize_rows",
    "maximum",
    "scale",
    "gather_rows",
    "logsumexp_rows",
    "backward",
    "grad_check",
]


class DiffcoreError(ValueError):
    pass


class ShapeError(DiffcoreError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class ZeroNormError(DiffcoreError):
    """Raised by l2_normalize_rows; ``rows`` lists the offending flat row indices."""

    def __init__(self, rows: Sequence[int]):
        self.rows = [int(r) for r in rows]
        super().__init__(f"l2_normalize_rows: zero-norm rows {self.rows}")


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    out: "Tensor"
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None


class Tensor:
    """Immutable value living on a graph.

    Only graphs create tensors; use :meth:`Graph.param` or :meth:`Graph.const`.
    """

    __array_ufunc__ = None

    def __init__(self, graph: "Graph", value: np.ndarray, node_id: int, trainable: bool, name: str = ""):
        value.flags.writeable = False
        self.graph = graph
        self.value = value
        self.id = node_id
        self.trainable = trainable
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = "param" if self.trainable else "tensor"
        return f"<{tag} #{self.id} {self.name or ''} shape={self.shape}>"

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
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return negate(self)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Graph:
    """Append-only tape of primitive applications.

    ``seed`` drives :attr:`rng`, the only randomness a graph hands out, so
    identical seeds give bit-identical initialisations.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.nodes: list[_Node] = []

    def _record(self, op, inputs, value, vjp, trainable=False, name="") -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise DiffcoreError(f"{op}: produced non-finite values")
        t = Tensor(self, value, len(self.nodes), trainable, name)
        self.nodes.append(_Node(op, tuple(i.id for i in inputs), t, vjp))
        return t

    def param(self, value, name: str = "") -> Tensor:
        """Trainable leaf; :func:`backward` reports a gradient for it."""
        return self._record("param", (), np.array(value, dtype=np.float64), None, True, name)

    def const(self, value, name: str = "") -> Tensor:
        return self._record("const", (), np.array(value, dtype=np.float64), None, False, name)

    @property
    def params(self) -> list[Tensor]:
        return [n.out for n in self.nodes if n.out.trainable]


# ---------------------------------------------------------------------------
# helpers


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
    raise DiffcoreError("at least one operand must be a Tensor")


def _lift(g: Graph, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.graph is not g:
            raise DiffcoreError("operands live on different graphs")
        return x
    return g.const(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return g._record("add", (a, b), a.value + b.value, lambda gr: (_unbroadcast(gr, sa), _unbroadcast(gr, sb)))


def sub(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return g._record("sub", (a, b), a.value - b.value, lambda gr: (_unbroadcast(gr, sa), -_unbroadcast(gr, sb)))


def mul(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return g._record(
        "mul", (a, b), av * bv, lambda gr: (_unbroadcast(gr * bv, av.shape), _unbroadcast(gr * av, bv.shape))
    )


def div(a, b) -> Tensor:
    """Elementwise quotient; denominators are clamped to magnitude >= EPS."""
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape("div", a, b)
    av = a.value
    bv = np.where(np.abs(b.value) < EPS, np.where(b.value < 0, -EPS, EPS), b.value)
    clamped = np.abs(b.value) < EPS
    out = av / bv

    def vjp(gr):
        ga = _unbroadcast(gr / bv, av.shape)
        gb = -gr * av / (bv * bv)
        gb = _unbroadcast(np.where(clamped, 0.0, gb), bv.shape)
        return ga, gb

    return g._record("div", (a, b), out, vjp)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast as batch dimensions."""
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    av, bv = a.value, b.value
    return g._record(
        "matmul",
        (a, b),
        av @ bv,
        lambda gr: (_unbroadcast(gr @ _swap(bv), av.shape), _unbroadcast(_swap(av) @ gr, bv.shape)),
    )


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError("transpose", a.shape)
    return a.graph._record("transpose", (a,), _swap(a.value).copy(), lambda gr: (_swap(gr),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.value.reshape(shape).copy()
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return a.graph._record("reshape", (a,), out, lambda gr: (gr.reshape(src),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _record as non-finite
        out = np.exp(a.value)
    return a.graph._record("exp", (a,), out, lambda gr: (gr * out,))


def log(a: Tensor) -> Tensor:
    """Natural log of ``max(a, EPS)``; no gradient flows through clamped entries."""
    av = a.value
    clamped = av < EPS
    safe = np.maximum(av, EPS)
    return a.graph._record("log", (a,), np.log(safe), lambda gr: (np.where(clamped, 0.0, gr / safe),))


def negate(a: Tensor) -> Tensor:
    return a.graph._record("negate", (a,), -a.value, lambda gr: (-gr,))


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is not None and not -len(shape) <= axis < len(shape):
        raise ShapeError("sum", shape)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(gr):
        if axis is not None and not keepdims:
            gr = np.expand_dims(gr, axis)
        return (np.broadcast_to(gr, shape).copy(),)

    return a.graph._record("sum", (a,), out, vjp)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None
    src = a.shape
    return a.graph._record("broadcast", (a,), out, lambda gr: (_unbroadcast(gr, src),))


def row_softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, with per-row max subtraction."""
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return a.graph._record("row_softmax", (a,), s, lambda gr: (s * (gr - (gr * s).sum(axis=-1, keepdims=True)),))


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale every last-axis vector to unit norm. Zero rows raise ZeroNormError."""
    norm = np.sqrt((a.value * a.value).sum(axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise ZeroNormError(np.flatnonzero(norm.reshape(-1) == 0.0))
    y = a.value / norm

    def vjp(gr):
        return ((gr - y * (gr * y).sum(axis=-1, keepdims=True)) / norm,)

    return a.graph._record("l2_normalize_rows", (a,), y, vjp)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape("maximum", a, b)
    av, bv = a.value, b.value
    pick_a = av >= bv
    return g._record(
        "maximum",
        (a, b),
        np.maximum(av, bv),
        lambda gr: (_unbroadcast(np.where(pick_a, gr, 0.0), av.shape), _unbroadcast(np.where(pick_a, 0.0, gr), bv.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.graph._record("scale", (a,), a.value * c, lambda gr: (gr * c,))


def gather_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if index.ndim != 1 or (index.size and (index.min() < -n or index.max() >= n)):
        raise ShapeError("gather_rows", a.shape, index.shape)
    shape = a.shape

    def vjp(gr):
        out = np.zeros(shape)
        np.add.at(out, index, gr)
        return (out,)

    return a.graph._record("gather_rows", (a,), a.value[index], vjp)


def logsumexp_rows(a: Tensor) -> Tensor:
    """log(sum(exp(a), axis=-1)) composed from primitives, shifted by the detached row max."""
    shift = a.value.max(axis=-1, keepdims=True)
    inner = sum(exp(sub(a, shift)), axis=-1)
    return add(log(inner), shift.reshape(shift.shape[:-1]))


# ---------------------------------------------------------------------------
# reverse pass


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``root`` w.r.t. every trainable leaf of its graph.

    Leaves that do not influence ``root`` get zero arrays.
    """
    if root.shape != ():
        raise DiffcoreError(f"backward: root must be scalar, got shape {root.shape}")
    g = root.graph
    grads: dict[int, np.ndarray] = {root.id: np.ones(())}
    for node in reversed(g.nodes[: root.id + 1]):
        if node.vjp is None:
            continue
        gr = grads.pop(node.out.id, None)
        if gr is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(gr)):
            if gi is None:
                continue
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    return {p: grads.get(p.id, np.zeros(p.shape)).reshape(p.shape) for p in g.params}


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` receives one trainable Tensor per entry of ``inputs`` (all on a fresh
    graph) and must return a scalar Tensor. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. ``max_coords``
    checks a seeded random subset of coordinates per input instead of all.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]

    def evaluate(values):
        g = Graph()
        return f(*[g.param(v) for v in values])

    root = evaluate(inputs)
    grads = backward(root)
    analytic = [grads[p] for p in root.graph.params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, x in enumerate(inputs):
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = np.sort(rng.choice(x.size, size=max_coords, replace=False))
        for c in coords:
            plus = [v.copy() for v in inputs]
            minus = [v.copy() for v in inputs]
            plus[k].reshape(-1)[c] += step
            minus[k].reshape(-1)[c] -= step
            numeric = (evaluate(plus).item() - evaluate(minus).item()) / (2 * step)
            a = analytic[k].reshape(-1)[c]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
