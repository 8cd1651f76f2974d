"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray``. Operations on tensors that require
gradients create a :class:`Node` linking the result to its inputs together
with a closure computing the vector-Jacobian product. Nodes are also
appended to the innermost active :class:`Tape`, so a forward pass run inside
``with Tape() as tape:`` leaves an explicit, topologically ordered record.

Node ids come from a process-wide monotonic counter, which means a child is
always numbered after its parents; ``backward`` relies on that to order a
graph it discovers by traversal when no tape is given.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DomainError,
    EmptyShape,
    NonFiniteGradient,
    NotScalar,
    ShapeMismatch,
)

_ids = itertools.count()
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Node:
    __slots__ = ("id", "op", "parents", "backward_fn", "ctx")

    def __init__(self, id, op, parents, backward_fn, ctx=None):
        self.id = id
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.ctx = ctx

    @property
    def parent_ids(self) -> tuple:
        return tuple(p.id for p in self.parents)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, parents={self.parent_ids})"


class Tape:
    """Ordered record of the nodes created while the tape is active."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.outputs: set[int] = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def mark_output(self, t: "Tensor") -> None:
        self.outputs.add(t.id)

    def check(self) -> None:
        """Raise ``AssertionError`` if ids repeat or a parent follows its child."""
        seen = set()
        for node in self.nodes:
            assert node.id not in seen, f"duplicate node id {node.id}"
            for pid in node.parent_ids:
                assert pid < node.id, f"parent {pid} does not precede {node.id}"
            seen.add(node.id)

    def __len__(self):
        return len(self.nodes)


class Tensor:
    """Shaped float array taking part in gradient recording."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim and 0 in arr.shape:
            raise EmptyShape(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.id = next(_ids)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise NotScalar(f"tensor of shape {self.shape} is not a scalar")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return pow(self, k)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def relu(self):
        return relu(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, params: Iterable["Tensor"] | None = None):
        return backward(self, params=params)


class Parameter(Tensor):
    """Leaf tensor owned by a model; ``trainable`` toggles gradient tracking."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None


def tensor_from(shape: Sequence[int], values, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    """Build a tensor from a shape and a flat row-major list of values."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise EmptyShape(f"shape {shape} has a non-positive dimension")
    flat = np.asarray(values, dtype=dtype).reshape(-1)
    if flat.size != int(np.prod(shape)):
        raise ShapeMismatch(f"{flat.size} values do not fill shape {shape}")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype=np.float64) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def make_result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable, ctx=None) -> Tensor:
    """Wrap ``data`` as an op output and record its node when needed.

    ``backward_fn`` maps the output gradient to a tuple with one entry per
    parent (``None`` for parents that need no gradient).
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.id = next(_ids)
    out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.node = Node(out.id, op, tuple(parents), backward_fn, ctx)
        stack = _tape_stack()
        if stack:
            stack[-1].record(out.node)
    return out


# ---------------------------------------------------------------------------
# broadcasting: identical shapes, scalars, or one per-channel vector
# ---------------------------------------------------------------------------
def _broadcast_view(a: np.ndarray, b: np.ndarray):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return a, b
    if b.ndim == 1 and a.ndim >= 2 and a.shape[1] == b.shape[0]:
        return a, b.reshape((1, -1) + (1,) * (a.ndim - 2))
    if a.ndim == 1 and b.ndim >= 2 and b.shape[1] == a.shape[0]:
        return a.reshape((1, -1) + (1,) * (b.ndim - 2)), b
    raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = (0,) + tuple(range(2, g.ndim))
    return g.sum(axis=axes).reshape(shape)


def _binary(a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, b.dtype if isinstance(b, Tensor) else np.float64)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a.dtype)
    av, bv = _broadcast_view(a.data, b.data)
    return a, b, av, bv


def add(a, b) -> Tensor:
    a, b, av, bv = _binary(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(av + bv, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b, av, bv = _binary(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(av - bv, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b, av, bv = _binary(a, b)

    def bw(g):
        ga = _unbroadcast(g * bv, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(av * bv, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b, av, bv = _binary(a, b)
    out = av / bv

    def bw(g):
        ga = _unbroadcast(g / bv, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bv, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, "div", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, "neg", (a,), lambda g: (-g,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value; clamp the input first")
    x = a.data
    return make_result(np.log(x), "log", (a,), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, "exp", (a,), lambda g: (g * out,))


def pow(a: Tensor, k: float) -> Tensor:
    k = float(k)
    x = a.data
    if not k.is_integer() and np.any(x < 0):
        raise DomainError(f"non-integer power {k} of a negative value")
    if k == 0.0:
        return make_result(np.ones_like(x), "pow", (a,), lambda g: (np.zeros_like(g),), ctx={"k": k})

    def bw(g):
        return (g * k * x ** (k - 1.0),)

    return make_result(x ** k, "pow", (a,), bw, ctx={"k": k})


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.maximum(a.data, 0), "relu", (a,), lambda g: (g * mask,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp bounds reversed: {lo} > {hi}")
    x = a.data
    passthrough = (x >= lo) & (x <= hi)
    return make_result(np.clip(x, lo, hi), "clamp", (a,), lambda g: (g * passthrough,), ctx={"lo": lo, "hi": hi})


def sum(a: Tensor) -> Tensor:
    shape = a.shape
    return make_result(np.asarray(a.data.sum(), dtype=a.dtype), "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_result(
        np.asarray(a.data.mean(), dtype=a.dtype),
        "mean",
        (a,),
        lambda g: (np.broadcast_to(g / n, shape).astype(a.dtype),),
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    return make_result(out, "reshape", (a,), lambda g: (g.reshape(old),))


_UNARY = {"neg": neg, "log": log, "exp": exp, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b=None, **kw) -> Tensor:
    """Dispatch an elementwise primitive by name.

    ``pow`` takes ``k=``; ``clamp`` takes ``lo=`` and ``hi=``.
    """
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind == "pow":
        return pow(a, kw["k"] if "k" in kw else b)
    if kind == "clamp":
        return clamp(a, kw["lo"], kw["hi"])
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------
def _collect(loss: Tensor) -> list[Node]:
    nodes, seen, stack = [], set(), [loss]
    while stack:
        t = stack.pop()
        if t.node is None or t.id in seen:
            continue
        seen.add(t.id)
        nodes.append(t.node)
        stack.extend(t.node.parents)
    nodes.sort(key=lambda n: n.id)
    return nodes


def backward(loss: Tensor, tape: Tape | None = None, params: Iterable[Tensor] | None = None) -> dict:
    """Propagate d(loss)/d(.) back through the graph.

    Gradients are accumulated into ``.grad`` of every leaf tensor with
    ``requires_grad``. Returns ``{tensor id: gradient array}`` for every
    tensor reached. Tensors listed in ``params`` that the loss does not
    depend on get zero gradients rather than an error.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.shape}")
    nodes = tape.nodes if tape is not None else _collect(loss)
    grads = {loss.id: np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(nodes):
        g = grads.get(node.id)
        if g is None:
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
            if p.node is None:
                leaves[p.id] = p
    if loss.node is None and loss.requires_grad:
        leaves[loss.id] = loss
    for tid, t in leaves.items():
        g = np.asarray(grads[tid], dtype=t.dtype).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
    if params is not None:
        for p in params:
            if p.id not in grads:
                grads[p.id] = np.zeros_like(p.data)
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
    return grads


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], probe_eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` is re-evaluated with each parameter element nudged by
    ``+-probe_eps``. Relative error falls back to absolute error where both
    gradients are below 1e-8 in magnitude.
    """
    if not 1e-7 <= probe_eps <= 1e-3:
        raise ValueError(f"probe_eps {probe_eps} outside [1e-7, 1e-3]")
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 tensors")
        if not np.all(np.isfinite(p.data)):
            raise ValueError("grad_check requires finite parameters")
        p.grad = None
    out = fn()
    backward(out, params=params)
    worst = 0.0
    for p in params:
        analytic = p.grad
        if not np.all(np.isfinite(analytic)):
            raise NonFiniteGradient("tape gradient contains NaN/Inf")
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + probe_eps
                fp = float(fn().data)
                flat[i] = orig - probe_eps
                fm = float(fn().data)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * probe_eps)
                if not np.isfinite(numeric):
                    raise NonFiniteGradient("finite difference produced NaN/Inf")
                err = abs(aflat[i] - numeric)
                denom = max(abs(aflat[i]), abs(numeric))
                if denom >= 1e-8:
                    err /= denom
                worst = max(worst, err)
    return worst
