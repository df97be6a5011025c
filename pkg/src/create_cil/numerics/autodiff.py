"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive checks its operand shapes explicitly (no implicit
broadcasting) and refuses to produce non-finite values.  A result is
recorded in the graph only when gradient mode is on and at least one
operand requires gradients.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "BackwardError",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "scale_rows",
    "reciprocal",
    "shift",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "sum",
    "mean",
    "sq_norm",
    "norm",
    "softmax",
    "log_softmax",
    "index_select",
    "pick",
    "concatenate",
    "reshape",
]


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        listed = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"{op}: non-finite output"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class BackwardError(RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor", "constructor received non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(op: str, value: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.op = op
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward_fn if track else None
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# -- primitives ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _result("matmul", ad @ bd, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _result("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-m vector to every row of an (n, m) matrix."""
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError("add_bias", x.shape, b.shape)
    return _result("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def scale_rows(x: Tensor, v: Tensor) -> Tensor:
    """Multiply row n of an (n, m) matrix by ``v[n]``."""
    if x.ndim != 2 or v.ndim != 1 or x.shape[0] != v.shape[0]:
        raise ShapeError("scale_rows", x.shape, v.shape)
    xd, vd = x.data, v.data
    return _result(
        "scale_rows",
        xd * vd[:, None],
        (x, v),
        lambda g: (g * vd[:, None], np.sum(g * xd, axis=1)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", x.data * c, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return _result("shift", x.data + float(c), (x,), lambda g: (g,))


def _tanh_grad(y: np.ndarray) -> np.ndarray:
    return 1.0 - y * y


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    # looked up at call time so a test can swap the derivative
    return _result("tanh", y, (x,), lambda g: (g * _tanh_grad(y),))


def reciprocal(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore"):
        y = 1.0 / xd
    return _result("reciprocal", y, (x,), lambda g: (-g * y * y,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _result("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return _result("log", y, (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    """Square root; the derivative at exactly zero is taken as zero."""
    xd = x.data
    with np.errstate(invalid="ignore"):
        y = np.sqrt(xd)

    def bw(g):
        out = np.zeros_like(y)
        pos = y > 0
        out[pos] = g[pos] * 0.5 / y[pos]
        return (out,)

    return _result("sqrt", y, (x,), bw)


def _expand(g: np.ndarray, shape: tuple[int, ...], axis: int | None) -> np.ndarray:
    if axis is None:
        return np.full(shape, float(g))
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape
    value = np.sum(x.data) if axis is None else np.sum(x.data, axis=axis)
    return _result("sum", np.asarray(value, dtype=np.float64), (x,), lambda g: (_expand(g, shape, axis),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def sq_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Squared Euclidean norm along ``axis``."""
    xd = x.data
    shape = x.shape
    return _result(
        "sq_norm",
        np.sum(xd * xd, axis=axis),
        (x,),
        lambda g: (2.0 * xd * _expand(g, shape, axis),),
    )


def norm(x: Tensor, axis: int = -1) -> Tensor:
    return sqrt(sq_norm(x, axis))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result("softmax", y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted log-softmax.

    With a boolean ``mask`` of the same shape the normaliser runs over the
    masked-in entries only; masked-out outputs are 0 and pass no gradient.
    """
    xd = x.data
    if mask is None:
        m = np.max(xd, axis=axis, keepdims=True)
        lse = m + np.log(np.sum(np.exp(xd - m), axis=axis, keepdims=True))
        y = xd - lse
        p = np.exp(y)

        def bw(g):
            return (g - p * np.sum(g, axis=axis, keepdims=True),)

        return _result("log_softmax", y, (x,), bw)

    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError("log_softmax", x.shape, mask.shape)
    if not np.all(mask.any(axis=axis)):
        raise ValueError("log_softmax: a slice has no unmasked entries")
    filled = np.where(mask, xd, -np.inf)
    m = np.max(filled, axis=axis, keepdims=True)
    e = np.where(mask, np.exp(filled - m), 0.0)
    lse = m + np.log(np.sum(e, axis=axis, keepdims=True))
    y = np.where(mask, xd - lse, 0.0)
    p = np.where(mask, np.exp(y), 0.0)

    def bw_masked(g):
        gm = np.where(mask, g, 0.0)
        return (gm - p * np.sum(gm, axis=axis, keepdims=True),)

    return _result("log_softmax", y, (x,), bw_masked)


def index_select(x: Tensor, idx: Sequence[int] | np.ndarray, axis: int = 0) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("index_select", x.shape, idx.shape)
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"index_select: index out of range for axis {axis} of size {n}")
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        if axis == 0:
            np.add.at(out, idx, g)
        else:
            np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _result("index_select", np.take(x.data, idx, axis=axis), (x,), bw)


def pick(x: Tensor, cols: Sequence[int] | np.ndarray) -> Tensor:
    """Return ``x[n, cols[n]]`` for every row n of a matrix."""
    cols = np.asarray(cols, dtype=np.intp)
    if x.ndim != 2 or cols.shape != (x.shape[0],):
        raise ShapeError("pick", x.shape, cols.shape)
    if cols.size and (cols.min() < 0 or cols.max() >= x.shape[1]):
        raise IndexError("pick: column index out of range")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, cols] = g
        return (out,)

    return _result("pick", x.data[rows, cols], (x,), bw)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concatenate: nothing to concatenate")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError("concatenate", ref, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result("concatenate", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        value = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _result("reshape", value, (x,), lambda g: (g.reshape(old),))


# -- reverse pass -------------------------------------------------------------


def _topological(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Propagate d(output)/d(leaf) to every leaf reachable from ``output``.

    Sets ``.grad`` on the reached leaves.  When ``params`` is given, returns
    their gradients in order; parameters not on any path get exact zeros.
    """
    if output.size != 1:
        raise BackwardError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise BackwardError("backward called on an output that is not attached to a graph")
    order = _topological(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64, copy=True)
    if params is None:
        return None
    out = []
    reached = {id(node) for node in order if node._backward is None}
    for p in params:
        if id(p) not in reached or p.grad is None:
            p.grad = np.zeros(p.shape)
        out.append(p.grad)
    return out
