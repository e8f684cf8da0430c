"""Dense float64 tensors with a small reverse-mode autodiff tape.

Every primitive works on a single sample ``(D,)`` or a batch ``(N, D)``.
Rows never interact, so the gradient of ``sum(scores)`` with respect to a
batch input is the stack of per-sample gradients. Dense products go
through ``np.einsum`` rather than BLAS so that a row's result does not
depend on which other rows share the batch.

Subgradient conventions: ``relu'(0) = 0`` and ``max`` routes its gradient to
the first maximal entry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "tanh",
    "exp",
    "log",
    "sum",
    "max",
    "logsumexp",
    "take",
    "reshape",
    "gen_term",
    "grad_input",
    "grad_params",
]


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


class Tensor:
    """Immutable float64 array, optionally recorded on a :class:`Tape`."""

    __slots__ = ("data", "tape", "index")

    def __init__(self, data, tape: Tape | None = None, index: int | None = None):
        self.data = data if _is_frozen_f64(data) else _frozen(data)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = "" if self.tape is None else f", node={self.index}"
        return f"Tensor(shape={self.shape}{tag})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))


def _is_frozen_f64(data) -> bool:
    return isinstance(data, np.ndarray) and data.dtype == np.float64 and not data.flags.writeable


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    parents: tuple[Tensor, ...]
    out: Tensor
    forward: Callable[..., np.ndarray] | None
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in execution order, which is a topological order, so
    walking them backwards is a valid reverse sweep. A tape is owned by one
    forward/backward pass and must not be shared between threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.input: Tensor | None = None
        # (layer index, W leaf, b leaf) for each dense layer, in order
        self.params: list[tuple[int, Tensor, Tensor]] = []

    def leaf(self, data) -> Tensor:
        out = Tensor(data, self, len(self.nodes))
        self.nodes.append(_Node("leaf", (), out, None, None))
        return out

    def watch_input(self, data) -> Tensor:
        self.input = self.leaf(data)
        return self.input

    @property
    def terminal(self) -> Tensor:
        if not self.nodes:
            raise ContractError("tape is empty")
        return self.nodes[-1].out

    def _record(self, op, parents, value, forward, vjp) -> Tensor:
        out = Tensor(value, self, len(self.nodes))
        self.nodes.append(_Node(op, parents, out, forward, vjp))
        return out

    def backward(self, out: Tensor | None = None, adjoint: float = 1.0) -> dict[int, np.ndarray]:
        """Accumulate adjoints from the scalar ``out`` back to every node."""
        out = self.terminal if out is None else out
        if out.tape is not self:
            raise ContractError("output tensor was not recorded on this tape")
        if out.size != 1:
            raise ContractError(f"backward needs a scalar terminal node, got shape {out.shape}")
        grads: dict[int, np.ndarray] = {out.index: np.full(out.shape, float(adjoint))}
        for i in range(out.index, -1, -1):
            node = self.nodes[i]
            g = grads.pop(i, None) if node.vjp is not None else grads.get(i)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or parent.tape is not self:
                    continue
                j = parent.index
                grads[j] = grads[j] + pg if j in grads else pg
        return grads

    def replay(self) -> list[np.ndarray]:
        """Re-run every recorded primitive from the stored leaves."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.forward is None:
                values.append(node.out.data)
                continue
            args = [values[p.index] if p.tape is self else p.data for p in node.parents]
            values.append(np.asarray(node.forward(*args), dtype=np.float64))
        return values


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("operands belong to different tapes")
            tape = t.tape
    return tape


def _apply(op, forward, vjp_factory, *operands) -> Tensor:
    ts = tuple(as_tensor(o) for o in operands)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        value = forward(*(t.data for t in ts))
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{op} produced non-finite values")
    tape = _tape_of(*ts)
    if tape is None:
        return Tensor(value)
    vjp = vjp_factory(*(t.data for t in ts), value)
    return tape._record(op, ts, value, forward, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- primitives --------------------------------------------------------------


def _matmul_fwd(x, w):
    return np.einsum("...d,od->...o", x, w)


def matmul(x, w) -> Tensor:
    """``x @ w.T`` for a row-major weight ``w`` of shape ``(out, in)``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"cannot multiply input {x.shape} by weight {w.shape}")

    need_x, need_w = x.tape is not None, w.tape is not None

    def vjp_factory(xd, wd, _):
        def vjp(g):
            gx = np.einsum("...o,od->...d", g, wd) if need_x else None
            gw = None
            if need_w:
                gw = np.einsum("no,nd->od", g, xd) if xd.ndim == 2 else np.outer(g, xd)
            return gx, gw

        return vjp

    return _apply("matmul", _matmul_fwd, vjp_factory, x, w)


def add(a, b) -> Tensor:
    """Broadcasting sum; covers bias addition."""

    def vjp_factory(ad, bd, _):
        return lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape))

    return _apply("add", np.add, vjp_factory, a, b)


def sub(a, b) -> Tensor:
    def vjp_factory(ad, bd, _):
        return lambda g: (_unbroadcast(g, ad.shape), -_unbroadcast(g, bd.shape))

    return _apply("sub", np.subtract, vjp_factory, a, b)


def mul(a, b) -> Tensor:
    def vjp_factory(ad, bd, _):
        return lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _apply("mul", np.multiply, vjp_factory, a, b)


def neg(a) -> Tensor:
    return _apply("neg", np.negative, lambda ad, _: (lambda g: (-g,)), a)


def _relu_fwd(x):
    return np.maximum(x, 0.0)


def relu(a) -> Tensor:
    return _apply("relu", _relu_fwd, lambda ad, _: (lambda g: (np.where(ad > 0, g, 0.0),)), a)


def tanh(a) -> Tensor:
    return _apply("tanh", np.tanh, lambda ad, y: (lambda g: (g * (1.0 - y * y),)), a)


def exp(a) -> Tensor:
    return _apply("exp", np.exp, lambda ad, y: (lambda g: (g * y,)), a)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _apply("log", np.log, lambda ad, y: (lambda g: (g / ad,)), a)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    def fwd(x):
        return np.sum(x, axis=axis)

    def vjp_factory(ad, _):
        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, ad.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), ad.shape).copy(),)

        return vjp

    return _apply("sum", fwd, vjp_factory, a)


def max(a, axis: int = -1) -> Tensor:  # noqa: A001
    def fwd(x):
        return np.max(x, axis=axis)

    def vjp_factory(ad, _):
        idx = np.expand_dims(np.argmax(ad, axis=axis), axis)

        def vjp(g):
            out = np.zeros_like(ad)
            np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
            return (out,)

        return vjp

    return _apply("max", fwd, vjp_factory, a)


def _lse(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def logsumexp(a, axis: int = -1) -> Tensor:
    """Stable ``log(sum(exp(a)))`` along ``axis``; its gradient is softmax."""

    def fwd(x):
        return _lse(x, axis)

    def vjp_factory(ad, y):
        def vjp(g):
            p = np.exp(ad - np.expand_dims(y, axis))
            return (np.expand_dims(g, axis) * p,)

        return vjp

    return _apply("logsumexp", fwd, vjp_factory, a)


def take(a, indices, axis: int = -1) -> Tensor:
    """Gather along ``axis`` with integer ``indices`` (``np.take_along_axis``)."""
    idx = np.asarray(indices, dtype=np.intp)

    def fwd(x):
        return np.take_along_axis(x, idx, axis=axis)

    def vjp_factory(ad, _):
        def vjp(g):
            out = np.zeros_like(ad)
            np.add.at(out, _along_axis_index(idx, ad.ndim, axis), g)
            return (out,)

        return vjp

    return _apply("take", fwd, vjp_factory, a)


def reshape(a, shape) -> Tensor:
    shape = tuple(shape)

    def fwd(x):
        return np.reshape(x, shape)

    return _apply("reshape", fwd, lambda ad, _: (lambda g: (np.reshape(g, ad.shape),)), a)


def _along_axis_index(idx, ndim, axis):
    axis = axis % ndim
    grids = list(np.indices(idx.shape, sparse=True))
    grids[axis] = idx
    return tuple(grids)


def _gen_term_fwd(logp, gamma):
    inner = logp < 0
    safe = np.where(inner, logp, -1.0)
    log1m = np.log(-np.expm1(safe))
    return np.where(inner, np.exp(gamma * (safe + log1m)), 0.0)


def gen_term(logp, gamma: float) -> Tensor:
    """Elementwise ``p**gamma * (1 - p)**gamma`` from log-probabilities.

    Evaluated as ``exp(gamma * (log p + log(1 - p)))`` with a hard zero (and
    zero gradient) at ``p == 1``.
    """
    gamma = float(gamma)

    def fwd(x):
        return _gen_term_fwd(x, gamma)

    def vjp_factory(ad, y):
        def vjp(g):
            p = np.exp(ad)
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(ad < 0, gamma * y * (1.0 - 2.0 * p) / (1.0 - p), 0.0)
            return (g * d,)

        return vjp

    return _apply("gen_term", fwd, vjp_factory, logp)


def grad_input(tape: Tape, scalar_output_adjoint: float = 1.0) -> np.ndarray:
    """Gradient of the tape's scalar terminal node with respect to its input."""
    if tape.input is None:
        raise ContractError("tape has no recorded input")
    grads = tape.backward(None, scalar_output_adjoint)
    g = grads.get(tape.input.index)
    return np.zeros(tape.input.shape) if g is None else g


def grad_params(tape: Tape, scalar_output_adjoint: float = 1.0) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(dW, db)`` for every dense layer recorded on the tape, in layer order."""
    if not tape.params:
        raise ContractError("tape has no recorded parameters")
    grads = tape.backward(None, scalar_output_adjoint)
    out = []
    for _, w, b in tape.params:
        gw, gb = grads.get(w.index), grads.get(b.index)
        out.append((np.zeros(w.shape) if gw is None else gw, np.zeros(b.shape) if gb is None else gb))
    return out
