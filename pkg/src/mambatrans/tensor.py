"""Dense tensors with reverse-mode gradient tracking.

Every differentiable primitive in :mod:`mambatrans.ops` produces a
:class:`Tensor` whose ``_node`` remembers its parents and a backward rule.
Recording onto an explicit :class:`GradTape` is optional; without one,
:func:`backward` walks the graph from the loss.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (inference)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class _Node:
    __slots__ = ("parents", "backward_fn", "op")

    def __init__(self, parents: Sequence["Tensor"], backward_fn: Callable, op: str):
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op


class Tensor:
    """N-dimensional array that can take part in gradient computation.

    Args:
        data: array-like payload. Float arrays keep their precision; anything
            else is cast to ``dtype`` (float32 by default).
        requires_grad: mark the tensor as a leaf that accumulates ``grad``.
        dtype: force a precision (``np.float32`` or ``np.float64``).
        name: optional label used in error messages and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in _FLOAT_DTYPES:
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar (bound in ops.py to avoid a circular import) -----
    def backward(self, tape: Optional["GradTape"] = None) -> None:
        backward(self, tape)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a recorded operation."""
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(parents, backward_fn, op)
        stack = _tape_stack()
        if stack:
            stack[-1].record(out)
    return out


class GradTape:
    """Ordered record of executed operations.

    Use as a context manager; operations run inside the block are appended in
    execution order, which is a valid topological order for replay.
    """

    def __init__(self) -> None:
        self.entries: list[Tensor] = []

    def record(self, out: Tensor) -> None:
        self.entries.append(out)

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)

    def clear(self) -> None:
        self.entries.clear()


def _topological(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t._node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._node.parents:
            if p._node is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, tape: Optional[GradTape] = None) -> None:
    """Populate ``grad`` on every leaf that requires it.

    Gradients accumulate into existing ``grad`` buffers, so call
    ``zero_grad`` between independent steps. Leaves that appear in the graph
    (or on the tape) but do not influence ``loss`` end up with zero grads.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = list(tape.entries) if tape is not None else _topological(loss)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0) + np.ones_like(loss.data)
        return
    if tape is not None and not any(e is loss for e in order):
        raise ValueError("loss was not recorded on the given tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out in reversed(order):
        node = out._node
        g = grads.pop(id(out), None)
        if g is None:
            # unreachable from the loss; still make sure leaves get a buffer
            for p in node.parents:
                if p._node is None and p.requires_grad and p.grad is None:
                    p.grad = np.zeros_like(p.data)
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad:
                continue
            if pg is None:
                if p._node is None and p.grad is None:
                    p.grad = np.zeros_like(p.data)
                continue
            if pg.shape != p.data.shape:
                raise RuntimeError(f"{node.op}: gradient shape {pg.shape} != parent shape {p.data.shape}")
            if p._node is None:
                if p.grad is None:
                    p.grad = np.array(pg, dtype=p.data.dtype, copy=True)
                else:
                    p.grad += pg
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
