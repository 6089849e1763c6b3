"""Reverse-mode automatic differentiation on 2-D float64 arrays.

Values live in :class:`Tensor`; a :class:`Tape` records every operation
applied to tensors bound to it, as a list of (output id, [(input id,
vjp closure), ...]) entries in forward execution order.  Replaying the
list in reverse is a valid reverse-topological walk, so ``backward``
is a single sweep with a dict of cotangent accumulators keyed by node
id.  Tapes are define-by-run and thread-local: tapes on different
threads share no state.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class NonFiniteError(FloatingPointError):
    """A recorded forward operation produced a NaN or Inf entry."""


_STATE = threading.local()


def _tape_stack() -> list:
    if not hasattr(_STATE, "stack"):
        _STATE.stack = []
        _STATE.grad_enabled = True
    return _STATE.stack


def _grad_enabled() -> bool:
    _tape_stack()
    return _STATE.grad_enabled


def _active_tape():
    stack = _tape_stack()
    if stack and _STATE.grad_enabled:
        return stack[-1]
    return None


class no_grad:
    """Context manager that suspends recording on all tapes."""

    def __enter__(self):
        _tape_stack()
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


def _as_2d(data) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    """A 2-D float64 value, optionally bound to a tape node."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data):
        self.data = _as_2d(data)
        self.tape = None
        self.nid = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tracked = "" if self.nid is None else f", node={self.nid}"
        return f"Tensor(shape={self.data.shape}{tracked})"


def constant(data) -> Tensor:
    return Tensor(data)


class Gradients:
    """Cotangents returned by a backward sweep, keyed by tape node id."""

    def __init__(self, tape, by_id: dict):
        self._tape = tape
        self._by_id = by_id

    def get(self, t: Tensor):
        if t.nid is None or t.tape is not self._tape:
            return None
        return self._by_id.get(t.nid)

    def __getitem__(self, t: Tensor) -> Array:
        g = self.get(t)
        if g is None:
            return np.zeros_like(t.data)
        return g


class Tape:
    """Ordered record of operations for one reverse-mode sweep."""

    def __init__(self):
        self._records: list[tuple[int, tuple]] = []
        self._next_id = 0

    def _fresh_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def watch(self, t: Tensor) -> Tensor:
        """Mark ``t`` as a leaf whose gradient should be accumulated."""
        if t.tape is not self:
            t.tape = self
            t.nid = self._fresh_id()
        return t

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def vjp(self, output: Tensor, cotangent) -> Gradients:
        """Pull ``cotangent`` at ``output`` back to every tracked node."""
        if output.tape is not self:
            raise ValueError("output tensor is not bound to this tape")
        seed = np.asarray(cotangent, dtype=np.float64).reshape(output.data.shape)
        grads: dict[int, Array] = {output.nid: seed}
        for out_id, parents in reversed(self._records):
            g = grads.get(out_id)
            if g is None:
                continue
            for in_id, vjp_fn in parents:
                contrib = vjp_fn(g)
                prev = grads.get(in_id)
                grads[in_id] = contrib if prev is None else prev + contrib
        return Gradients(self, grads)

    def backward(self, loss: Tensor) -> Gradients:
        """Gradient sweep from a 1x1 loss seeded with 1.0."""
        if loss.data.shape != (1, 1):
            raise ValueError(f"loss must be 1x1, got {loss.data.shape}")
        return self.vjp(loss, np.ones((1, 1)))


def record_op(out_data, parents: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Create the output tensor of an operation, recording it if tracked.

    ``parents`` pairs each input tensor with a closure mapping the output
    cotangent to that input's cotangent.  Only inputs bound to the active
    tape are recorded; everything else is treated as a constant.
    """
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is None:
        return out
    tracked = [(p.nid, fn) for p, fn in parents if p.tape is tape]
    if not tracked:
        return out
    if not np.isfinite(out.data).all():
        raise NonFiniteError("non-finite entries in forward operation output")
    out.tape = tape
    out.nid = tape._fresh_id()
    tape._records.append((out.nid, tuple(tracked)))
    return out


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return record_op(
        ad @ bd,
        [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)],
    )


def transpose(a: Tensor) -> Tensor:
    return record_op(a.data.T, [(a, lambda g: g.T)])


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record_op(y, [(a, lambda g: g * (1.0 - y * y))])


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return record_op(a.data * mask, [(a, lambda g: g * mask)])


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")
    return record_op(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub shape mismatch {a.data.shape} vs {b.data.shape}")
    return record_op(a.data - b.data, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    return record_op(ad * bd, [(a, lambda g: g * bd), (b, lambda g: g * ad)])


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op(a.data * c, [(a, lambda g: g * c)])


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Broadcast-add a (1, m) row to every row of ``a``."""
    if row.data.shape != (1, a.cols):
        raise ValueError(f"row must be (1, {a.cols}), got {row.data.shape}")
    return record_op(
        a.data + row.data,
        [(a, lambda g: g), (row, lambda g: g.sum(axis=0, keepdims=True))],
    )


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return record_op(
        a.data.sum().reshape(1, 1),
        [(a, lambda g: np.full(shape, g[0, 0]))],
    )


def sum_rows(a: Tensor) -> Tensor:
    """Per-row totals, shape (n, 1)."""
    m = a.cols
    return record_op(
        a.data.sum(axis=1, keepdims=True),
        [(a, lambda g: np.repeat(g, m, axis=1))],
    )


def sum_cols(a: Tensor) -> Tensor:
    """Per-column totals, shape (1, m)."""
    n = a.rows
    return record_op(
        a.data.sum(axis=0, keepdims=True),
        [(a, lambda g: np.repeat(g, n, axis=0))],
    )


def softmax_rows(a: Tensor, mask=None) -> Tensor:
    """Row-wise softmax, optionally restricted to mask==1 entries.

    Masked-out entries get probability exactly 0.  Every row must keep at
    least one active entry.
    """
    x = a.data
    if mask is None:
        m = None
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
    else:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != x.shape:
            raise ValueError("mask shape mismatch")
        if not (m.sum(axis=1) > 0).all():
            raise ValueError("softmax row with no active entries")
        neg = np.where(m > 0, x, -np.inf)
        shifted = x - neg.max(axis=1, keepdims=True)
        e = np.exp(shifted) * m
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return y * (g - dot)

    return record_op(y, [(a, back)])


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise ValueError("concat_cols row mismatch")
    ca = a.cols
    return record_op(
        np.concatenate([a.data, b.data], axis=1),
        [(a, lambda g: g[:, :ca]), (b, lambda g: g[:, ca:])],
    )


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate tensors along rows."""
    if not parts:
        raise ValueError("stack_rows needs at least one tensor")
    offsets = np.cumsum([0] + [p.rows for p in parts])
    parents = []
    for p, i0, i1 in zip(parts, offsets[:-1], offsets[1:]):
        parents.append((p, lambda g, i0=i0, i1=i1: g[i0:i1]))
    return record_op(np.concatenate([p.data for p in parts], axis=0), parents)


def slice_rows(a: Tensor, i0: int, i1: int) -> Tensor:
    n, m = a.data.shape
    if not (0 <= i0 < i1 <= n):
        raise ValueError(f"row slice [{i0}:{i1}] out of range for {n} rows")

    def back(g):
        full = np.zeros((n, m))
        full[i0:i1] = g
        return full

    return record_op(a.data[i0:i1].copy(), [(a, back)])


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    n, m = a.data.shape
    if not (0 <= j0 < j1 <= m):
        raise ValueError(f"col slice [{j0}:{j1}] out of range for {m} cols")

    def back(g):
        full = np.zeros((n, m))
        full[:, j0:j1] = g
        return full

    return record_op(a.data[:, j0:j1].copy(), [(a, back)])


def mul_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``a`` by the 1x1 tensor ``s``."""
    if s.data.shape != (1, 1):
        raise ValueError("scalar tensor must be 1x1")
    ad, sv = a.data, s.data[0, 0]
    return record_op(
        ad * sv,
        [(a, lambda g: g * sv), (s, lambda g: (g * ad).sum().reshape(1, 1))],
    )


def reciprocal(s: Tensor) -> Tensor:
    """Reciprocal of a 1x1 tensor."""
    if s.data.shape != (1, 1):
        raise ValueError("scalar tensor must be 1x1")
    v = s.data[0, 0]
    return record_op(
        np.array([[1.0 / v]]),
        [(s, lambda g: -g / (v * v))],
    )


def cross_entropy_mean(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer class labels under row-wise log-softmax."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.data.shape
    if y.shape[0] != n:
        raise ValueError("one label per logit row required")
    if y.min() < 0 or y.max() >= c:
        raise ValueError("label out of range")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -logp[np.arange(n), y].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        return g[0, 0] * p / n

    return record_op(np.array([[loss]]), [(logits, back)])
