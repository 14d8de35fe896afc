"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every differentiable value lives on a :class:`Tape`. Operations append their
output to the tape of their inputs, so the tape is topologically ordered by
construction and :func:`backward` is a single reverse sweep over it.

Broadcasting is limited to what small MLPs need: equal shapes, a scalar
operand, or a row vector added to every row of a matrix.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class Tensor:
    """Dense float64 array recorded on a tape.

    ``grad`` is only populated on leaves that require gradients; intermediate
    gradients are transient and discarded after :func:`backward`.
    """

    __slots__ = ("data", "grad", "tape", "node_id", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, tape, parents=(), backward_fn=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.node_id = tape._register(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node_id={self.node_id}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division is only supported by a Python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of every tensor created in one computation."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []

    def _register(self, t: Tensor) -> int:
        self.nodes.append(t)
        return len(self.nodes) - 1

    def leaf(self, data: ArrayLike, requires_grad: bool = True) -> Tensor:
        t = Tensor(np.array(data, dtype=np.float64), self, requires_grad=requires_grad)
        if requires_grad:
            self.leaves.append(t)
        return t

    def constant(self, data: ArrayLike) -> Tensor:
        return Tensor(np.array(data, dtype=np.float64), self, requires_grad=False)

    def zero_grad(self):
        for t in self.leaves:
            t.grad = None


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ContractError("operands belong to different tapes")
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise ContractError("at least one operand must be a Tensor")


def _make(data, parents, backward_fn) -> Tensor:
    tape = parents[0].tape
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, tape, parents if needs else (), backward_fn if needs else None, needs)


def _check_broadcast(a: np.ndarray, b: np.ndarray):
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise ShapeError(f"cannot broadcast shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    if int(np.prod(shape)) == 1:
        return np.full(shape, g.sum())
    # row-vector bias
    return g.sum(axis=0).reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def elu(a: Tensor) -> Tensor:
    """x if x > 0 else exp(x) - 1. The derivative at exactly 0 is taken as 1."""
    ad = a.data
    neg_part = np.expm1(np.minimum(ad, 0.0))
    out = np.where(ad > 0, ad, neg_part)
    deriv = np.where(ad >= 0, 1.0, neg_part + 1.0)
    return _make(out, (a,), lambda g: (g * deriv,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input is inside."""
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(out, (a,), bw)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------- linear algebra and indexing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tape = _tape_of(*tensors)
    ts = [_lift(t, tape) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, cuts, axis=axis)))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop], (a,), bw)


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather (embedding lookup); gradient is scatter-added."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx], (table,), bw)


def pick(a: Tensor, cols: np.ndarray) -> Tensor:
    """Select ``a[i, cols[i]]`` for every row i."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _make(a.data[rows, cols], (a,), bw)


# ---------------------------------------------------------------- softmax family


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (logits,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"label outside [0, {n_classes})")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy in nats, stabilised by max subtraction.

    ``reduction`` is ``"mean"`` (scalar) or ``"none"`` (one value per row).
    """
    if logits.data.ndim == 1:
        logits = reshape(logits, (1, -1))
    labels = _check_labels(np.atleast_1d(labels), logits.shape[1])
    per_row = neg(pick(log_softmax(logits), labels))
    if reduction == "none":
        return per_row
    return mean(per_row)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def detach(a: Tensor) -> Tensor:
    return a.tape.constant(a.data)


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on ``tape``.

    Calling twice without :meth:`Tape.zero_grad` adds the gradients again.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("loss is not recorded on this tape")
    for leaf in tape.leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.requires_grad:
                node.grad = node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


def gradient_check(f: Callable[[Tensor], Tensor], x: ArrayLike, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    Error per component is ``|ad - cd| / (|cd| + 1e-8)``.
    """
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(x)
    backward(tape, f(leaf))
    ad = leaf.grad

    cd = np.empty_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(Tape().leaf(x, requires_grad=False)).data)
        flat[i] = orig - eps
        down = float(f(Tape().leaf(x, requires_grad=False)).data)
        flat[i] = orig
        cd.reshape(-1)[i] = (up - down) / (2 * eps)
    return float(np.max(np.abs(ad - cd) / (np.abs(cd) + 1e-8)))
