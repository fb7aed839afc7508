"""Reverse-mode automatic differentiation over numpy float64 arrays.

The op set is exactly what the rationalization models need: dense matmul,
elementwise arithmetic, sigmoid / softmax / log / exp / integer power,
masked sequence pooling, embedding lookup, concatenation, and the
straight-through binarizer that makes discrete token masks trainable.

Every op records a node holding its inputs and a vector-Jacobian product;
whether an input receives gradient is decided when the op is recorded, so
freezing a parameter set during a forward pass keeps it frozen for the
matching backward pass. ``backward(loss)`` traces the ancestry of ``loss``
into a :class:`ComputationTape` (creation order, hence topological) and
replays it once in reverse, accumulating gradients additively into every
participating tensor. Tapes built from different losses share nothing, so
independent runs may live on separate threads.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationTape",
    "ShapeError",
    "backward",
    "no_grad",
    "stop_gradient",
    "straight_through_binarize",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "sigmoid",
    "softmax",
    "log",
    "exp",
    "power",
    "sum",
    "mean",
    "l2_norm",
    "absolute",
    "gather",
    "concat",
    "narrow",
    "reshape",
    "transpose",
    "mean_pool",
    "max_pool",
]

LOG_CLAMP = 1e-12  # inputs to log are clamped here to keep cross entropies finite

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the op and shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        pretty = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording, e.g. for evaluation forward passes."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An n-dimensional float64 array, optionally tracked for gradients.

    ``grad`` stays ``None`` until a backward pass deposits into it; a
    ``None`` gradient means zero. Tensors with ``requires_grad=False``
    never accumulate gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # arithmetic sugar; scalars are coerced to constant tensors
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, n):
        return power(self, n)

    def __abs__(self):
        return absolute(self)


class _Node:
    __slots__ = ("op", "inputs", "out", "vjp", "seq")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out: Tensor,
                 vjp: Callable[[np.ndarray], None]):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp
        self.seq = next(_seq)


class ComputationTape:
    """The recorded ops reaching one output, in topological (creation) order."""

    def __init__(self, nodes: list[_Node]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationTape":
        nodes: list[_Node] = []
        seen: set[int] = set()
        stack = [root]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _sink(t: Tensor) -> Callable[[np.ndarray], None] | None:
    """Gradient deposit for ``t``, bound at op-construction time.

    Returns ``None`` when the tensor does not take gradient right now, so a
    parameter frozen during the forward pass stays frozen in backward even
    if its flag is flipped back in between.
    """
    if not t.requires_grad:
        return None

    def put(g: np.ndarray) -> None:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g

    return put


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor],
          vjp: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, tuple(inputs), out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively across multiple uses of a tensor. The
    loss must be a single scalar value.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._node is None:
        # detached or constant loss: nothing upstream receives gradient
        put = _sink(loss)
        if put is not None:
            put(np.ones_like(loss.data))
        return
    loss.grad = np.ones_like(loss.data)
    tape = ComputationTape.trace(loss)
    for node in reversed(tape.nodes):
        if node.out.grad is not None:
            node.vjp(node.out.grad)


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    put_a, put_b = _sink(a), _sink(b)

    def vjp(g):
        if put_a:
            put_a(_unbroadcast(g, a.shape))
        if put_b:
            put_b(_unbroadcast(g, b.shape))

    return _make("add", data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    put_a, put_b = _sink(a), _sink(b)

    def vjp(g):
        if put_a:
            put_a(_unbroadcast(g, a.shape))
        if put_b:
            put_b(_unbroadcast(-g, b.shape))

    return _make("sub", data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    put_a, put_b = _sink(a), _sink(b)

    def vjp(g):
        if put_a:
            put_a(_unbroadcast(g * b.data, a.shape))
        if put_b:
            put_b(_unbroadcast(g * a.data, b.shape))

    return _make("mul", data, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    put_a = _sink(a)

    def vjp(g):
        if put_a:
            put_a(-g)

    return _make("neg", -a.data, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = np.matmul(a.data, b.data)
    put_a, put_b = _sink(a), _sink(b)

    def vjp(g):
        if put_a:
            put_a(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if put_b:
            put_b(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make("matmul", data, (a, b), vjp)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    put = _sink(x)

    def vjp(g):
        if put:
            put(g * out * (1.0 - out))

    return _make("sigmoid", out, (x,), vjp)


def softmax(x) -> Tensor:
    """Row-wise softmax over the last axis, computed with max subtraction."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    put = _sink(x)

    def vjp(g):
        if put:
            inner = (g * out).sum(axis=-1, keepdims=True)
            put(out * (g - inner))

    return _make("softmax", out, (x,), vjp)


def log(x) -> Tensor:
    """Natural log with the input clamped at ``LOG_CLAMP`` to avoid -inf."""
    x = _as_tensor(x)
    clamped = np.maximum(x.data, LOG_CLAMP)
    out = np.log(clamped)
    put = _sink(x)

    def vjp(g):
        if put:
            put(np.where(x.data > LOG_CLAMP, g / clamped, 0.0))

    return _make("log", out, (x,), vjp)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    put = _sink(x)

    def vjp(g):
        if put:
            put(g * out)

    return _make("exp", out, (x,), vjp)


def power(x, n) -> Tensor:
    """Elementwise integer power x**n."""
    x = _as_tensor(x)
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool):
        raise TypeError(f"power: exponent must be an integer, got {n!r}")
    n = int(n)
    out = x.data ** n
    put = _sink(x)

    def vjp(g):
        if put and n != 0:
            put(g * n * x.data ** (n - 1))

    return _make("power", out, (x,), vjp)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    put = _sink(x)

    def vjp(g):
        if put:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            put(np.broadcast_to(g, x.shape).copy())

    return _make("sum", out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in np.atleast_1d(axis)])
    put = _sink(x)

    def vjp(g):
        if put:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            put(np.broadcast_to(g, x.shape) / count)

    return _make("mean", out, (x,), vjp)


def l2_norm(x) -> Tensor:
    """Euclidean norm of all entries, as a scalar. Subgradient 0 at zero."""
    x = _as_tensor(x)
    out = np.sqrt((x.data ** 2).sum())
    put = _sink(x)

    def vjp(g):
        if put and out > 0.0:
            put(g * x.data / out)

    return _make("l2_norm", np.asarray(out), (x,), vjp)


def absolute(x) -> Tensor:
    """Elementwise absolute value. Subgradient 0 at zero."""
    x = _as_tensor(x)
    put = _sink(x)

    def vjp(g):
        if put:
            put(g * np.sign(x.data))

    return _make("absolute", np.abs(x.data), (x,), vjp)


# ---------------------------------------------------------------------------
# structural ops


def gather(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients accumulate back into the rows."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError("gather", table.shape)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = np.argwhere((ids < 0) | (ids >= vocab))[0]
        pos = tuple(int(i) for i in bad)
        raise IndexError(
            f"gather: token id {int(ids[pos])} at position {pos} outside table of size {vocab}")
    data = table.data[ids]
    put = _sink(table)

    def vjp(g):
        if put:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            put(gt)

    return _make("gather", data, (table,), vjp)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[p.shape for p in parts]) from None
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    puts = [_sink(p) for p in parts]

    def vjp(g):
        for put, piece in zip(puts, np.split(g, bounds, axis=axis)):
            if put:
                put(piece)

    return _make("concat", data, tuple(parts), vjp)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    x = _as_tensor(x)
    ax = axis % x.ndim
    if start < 0 or start + length > x.shape[ax]:
        raise ShapeError("narrow", x.shape, (start, length))
    idx = tuple(slice(start, start + length) if i == ax else slice(None)
                for i in range(x.ndim))
    data = x.data[idx]
    put = _sink(x)

    def vjp(g):
        if put:
            gx = np.zeros_like(x.data)
            gx[idx] = g
            put(gx)

    return _make("narrow", data, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)
    put = _sink(x)

    def vjp(g):
        if put:
            put(g.reshape(x.shape))

    return _make("reshape", data, (x,), vjp)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("transpose", x.shape)
    data = np.swapaxes(x.data, -1, -2)
    put = _sink(x)

    def vjp(g):
        if put:
            put(np.swapaxes(g, -1, -2))

    return _make("transpose", data, (x,), vjp)


# ---------------------------------------------------------------------------
# masked sequence pooling; x is (..., L, D), valid is (..., L) with 1 = real token


def _check_pool(op: str, x: Tensor, valid: np.ndarray) -> None:
    if x.ndim < 2 or valid.shape != x.shape[:-1]:
        raise ShapeError(op, x.shape, valid.shape)
    if not (valid.sum(axis=-1) > 0).all():
        raise ValueError(f"{op}: every sequence needs at least one valid position")


def mean_pool(x, valid) -> Tensor:
    """Mean over the sequence axis, counting only valid positions."""
    x = _as_tensor(x)
    valid = np.asarray(valid, dtype=np.float64)
    _check_pool("mean_pool", x, valid)
    counts = valid.sum(axis=-1)[..., None]
    data = (x.data * valid[..., None]).sum(axis=-2) / counts
    put = _sink(x)

    def vjp(g):
        if put:
            put(g[..., None, :] * (valid / valid.sum(axis=-1, keepdims=True))[..., None])

    return _make("mean_pool", data, (x,), vjp)


def max_pool(x, valid) -> Tensor:
    """Max over the sequence axis; invalid positions count as -inf."""
    x = _as_tensor(x)
    valid = np.asarray(valid, dtype=np.float64)
    _check_pool("max_pool", x, valid)
    masked = np.where(valid[..., None] > 0, x.data, -np.inf)
    idx = masked.argmax(axis=-2)
    data = np.take_along_axis(masked, idx[..., None, :], axis=-2).squeeze(-2)
    put = _sink(x)

    def vjp(g):
        if put:
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
            put(gx)

    return _make("max_pool", data, (x,), vjp)


# ---------------------------------------------------------------------------
# gradient flow control


def stop_gradient(t) -> Tensor:
    """Value-identical tensor through which backward propagates zero gradient."""
    t = _as_tensor(t)
    return Tensor(t.data)


def straight_through_binarize(p, threshold: float = 0.5, *,
                              stochastic: bool = False,
                              rng: np.random.Generator | None = None,
                              grad_hook: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
                              ) -> Tensor:
    """Binarize probabilities with an identity straight-through backward.

    Forward: ``z_i = 1`` if ``p_i >= threshold`` (ties select the token), or
    ``z_i ~ Bernoulli(p_i)`` in stochastic mode. Backward treats dz/dp as 1;
    ``grad_hook(upstream, p_values)`` can substitute another estimator.
    """
    p = _as_tensor(p)
    d = p.data
    if d.size and (d.min() < 0.0 or d.max() > 1.0):
        bad = np.argwhere((d < 0.0) | (d > 1.0))[0]
        pos = tuple(int(i) for i in bad)
        raise ValueError(
            f"straight_through_binarize: probability {d[pos]} at {pos} outside [0, 1]")
    if stochastic:
        if rng is None:
            raise ValueError("straight_through_binarize: stochastic mode needs an rng")
        z = (rng.random(d.shape) < d).astype(np.float64)
    else:
        z = (d >= threshold).astype(np.float64)
    put = _sink(p)

    def vjp(g):
        if put:
            put(g if grad_hook is None else grad_hook(g, d))

    return _make("straight_through", z, (p,), vjp)
