"""Small reverse-mode differentiation engine over dense float64 numpy arrays.

Operations record themselves on the active :class:`Tape` (one per thread) when
any input requires a gradient.  Outside a tape every op is plain numpy, which
is what inference and validation passes use.

Graph sparsity is handled with ``gather_rows`` / ``scatter_sum`` over edge
index arrays and ``segment_softmax`` over target ids.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "NonFiniteError",
    "Tape",
    "Tensor",
    "abs_",
    "add",
    "backward",
    "concat",
    "custom",
    "finite_difference_check",
    "gather_rows",
    "head_matmul",
    "leaky_relu",
    "linear",
    "matmul",
    "mean",
    "merge_heads",
    "mul",
    "relu",
    "reshape",
    "rowdot",
    "scale",
    "scatter_sum",
    "segment_softmax",
    "sigmoid",
    "softplus",
    "split_heads",
    "sub",
    "sum_",
    "tensor",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; the functional forms below are canonical
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "parents", "vjp", "op")

    def __init__(self, out, parents, vjp, op):
        self.out = out
        self.parents = parents
        self.vjp = vjp
        self.op = op


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as ops run, so the record is already topologically
    sorted.  ``backward`` consumes the tape; call :meth:`reset` to reuse it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def record(self, out: Tensor, parents: Sequence[Tensor], vjp, op: str) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward(); call reset() first")
        out._tape = self
        self.nodes.append(_Node(out, tuple(parents), vjp, op))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("backward() called twice without reset()")
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent._tape is not self:
                    leaves[key] = parent

        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.nodes = []
        self.consumed = True


def backward(loss: Tensor) -> None:
    """Backpropagate a scalar loss through the tape it was recorded on."""
    if loss._tape is None:
        raise ValueError("loss is not on any tape (was it computed inside `with Tape():`?)")
    loss._tape.backward(loss)


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    # a finite sum rules out NaN/Inf entries; only fall back on overflow
    if not np.isfinite(np.add.reduce(out, axis=None)) and not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return out


def _make(out: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    _finite(out, op)
    needs = any(p.requires_grad for p in parents)
    t = Tensor(out, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(t, parents, vjp, op)
    return t


def custom(out: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Record a user-defined primitive.

    ``vjp(g)`` must return one gradient (or None) per parent.
    """
    return _make(np.asarray(out, dtype=np.float64), list(parents), vjp, op)


# ---------------------------------------------------------------------------
# elementwise / dense


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(lead + i for i, n in enumerate(shape) if n == 1 and g.shape[lead + i] != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} x {weight.shape}")
    out = x.data @ weight.data
    if bias is None:
        return _make(out, (x, weight), lambda g: (g @ weight.data.T, x.data.T @ g), "linear")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    out = out + bias.data
    return _make(
        out,
        (x, weight, bias),
        lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)),
        "linear",
    )


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * s,), "softplus")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return _make(out, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _make(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean"
    )


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(N, D) -> (N, heads, D // heads)."""
    n, d = x.shape
    if d % heads:
        raise ValueError(f"dimension {d} not divisible by {heads} heads")
    return reshape(x, (n, heads, d // heads))


def merge_heads(x: Tensor) -> Tensor:
    """(N, heads, d) -> (N, heads * d)."""
    n, h, d = x.shape
    return reshape(x, (n, h * d))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _make(out, xs, vjp, "concat")


def head_matmul(x: Tensor, w: Tensor) -> Tensor:
    """Per-head matrix product: (N, h, d) x (h, d, f) -> (N, h, f)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[0] or x.shape[2] != w.shape[1]:
        raise ValueError(f"head_matmul shape mismatch: {x.shape} x {w.shape}")
    xt = x.data.transpose(1, 0, 2)
    out = np.matmul(xt, w.data).transpose(1, 0, 2)

    def vjp(g):
        gt = g.transpose(1, 0, 2)
        gx = np.matmul(gt, w.data.transpose(0, 2, 1)).transpose(1, 0, 2)
        gw = np.matmul(xt.transpose(0, 2, 1), gt)
        return np.ascontiguousarray(gx), gw

    return _make(np.ascontiguousarray(out), (x, w), vjp, "head_matmul")


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Dot product over the last axis."""
    if a.shape != b.shape:
        raise ValueError(f"rowdot shape mismatch: {a.shape} vs {b.shape}")
    out = (a.data * b.data).sum(axis=-1)

    def vjp(g):
        g = g[..., None]
        return g * b.data, g * a.data

    return _make(out, (a, b), vjp, "rowdot")


# ---------------------------------------------------------------------------
# graph kernels


def _check_index(index: np.ndarray, size: int, op: str) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ValueError(f"{op}: index must be 1-D")
    if index.size and (index.min() < 0 or index.max() >= size):
        raise IndexError(f"{op}: index out of range for size {size}")
    return index


class _Segments:
    """Segment-id array with a sparse (size x n) incidence matrix for sums."""

    __slots__ = ("index", "size", "_incidence")

    def __init__(self, index: np.ndarray, size: int):
        self.index = index
        self.size = size
        self._incidence = None

    @property
    def incidence(self) -> sparse.csr_matrix:
        if self._incidence is None:
            n = self.index.size
            self._incidence = sparse.csr_matrix(
                (np.ones(n), (self.index, np.arange(n))), shape=(self.size, n)
            )
        return self._incidence

    def sum(self, values: np.ndarray) -> np.ndarray:
        flat = values.reshape(values.shape[0], -1)
        out = self.incidence @ flat
        return np.asarray(out).reshape((self.size,) + values.shape[1:])

    def max(self, values: np.ndarray) -> np.ndarray:
        out = np.full((self.size,) + values.shape[1:], -np.inf)
        np.maximum.at(out, self.index, values)
        return out


def _scatter(values: np.ndarray, index: np.ndarray, size: int, seg: _Segments | None = None) -> np.ndarray:
    return (seg or _Segments(index, size)).sum(values)


def gather_rows(x: Tensor, index) -> Tensor:
    index = _check_index(index, x.shape[0], "gather_rows")
    n = x.shape[0]
    return _make(x.data[index], (x,), lambda g: (_scatter(g, index, n),), "gather_rows")


def scatter_sum(values: Tensor, index, size: int) -> Tensor:
    if values.shape[0] != len(index):
        raise ValueError(f"scatter_sum: {values.shape[0]} values for {len(index)} indices")
    index = _check_index(index, size, "scatter_sum")
    out = _scatter(values.data, index, size)
    return _make(out, (values,), lambda g: (g[index],), "scatter_sum")


def segment_softmax(scores: Tensor, index, size: int | None = None) -> Tensor:
    """Softmax of ``scores`` over rows sharing the same segment id.

    Extra trailing axes (e.g. heads) are normalised independently.
    """
    index = np.asarray(index, dtype=np.int64)
    if scores.shape[0] != index.shape[0]:
        raise ValueError(f"segment_softmax: {scores.shape[0]} scores for {len(index)} targets")
    if size is None:
        size = int(index.max()) + 1 if index.size else 0
    index = _check_index(index, size, "segment_softmax")
    s = scores.data
    seg = _Segments(index, size)
    seg_max = seg.max(s)
    e = np.exp(s - seg_max[index])
    denom = _scatter(e, index, size, seg)
    y = e / denom[index]

    def vjp(g):
        dot = _scatter(g * y, index, size, seg)
        return (y * (g - dot[index]),)

    return _make(y, (scores,), vjp, "segment_softmax")


# ---------------------------------------------------------------------------
# verification


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5, floor: float = 1e-8
) -> float:
    """Worst relative error between the tape gradient of ``f`` at ``x`` and
    central differences.

    ``x.data`` is perturbed in place and restored, so ``f`` may read ``x``
    through a closure instead of its argument.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            y = f(x)
            if y.data.size != 1:
                raise ValueError("f must return a scalar")
            if y._tape is tape:
                tape.backward(y)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        x.grad = None

        base = float(f(x).data)
        if float(f(x).data) != base:
            raise RuntimeError("f is not deterministic")

        flat = x.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(f(x).data)
            flat[i] = orig - epsilon
            lo = float(f(x).data)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * epsilon)
    finally:
        x.requires_grad = was

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
    return float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0

