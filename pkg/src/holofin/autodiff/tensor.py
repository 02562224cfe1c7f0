"""Tensors and the gradient tape.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. :func:`backward` walks the tape in
exact reverse recording order.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class Tensor:
    """A dense real array, optionally tracked for reverse-mode differentiation."""

    __slots__ = ("value", "requires_grad", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(value, dtype=dtype)
        if arr.dtype.kind not in "fiu":
            raise TypeError(f"Tensor values must be real, got dtype {arr.dtype}")
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.value = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    inputs: tuple[Tensor | None, ...]
    outputs: tuple[Tensor, ...]
    vjp: Callable[[list[np.ndarray | None]], Sequence[np.ndarray | None]]
    op: str


_state = threading.local()


def _stack() -> list["Tape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


class Tape:
    """Ordered record of differentiable operations. Single owner, single thread."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def current_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def record(op: str, inputs: Sequence[Tensor | None], outputs: Sequence[Tensor], vjp) -> None:
    """Mark outputs as tracked and append a node if any input requires a gradient."""
    if not any(t is not None and t.requires_grad for t in inputs):
        return
    for out in outputs:
        out.requires_grad = True
    tape = current_tape()
    if tape is not None:
        tape.nodes.append(Node(tuple(inputs), tuple(outputs), vjp, op))


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to ``params``.

    Parameters that the loss does not depend on get zero gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        gouts = [grads.get(id(o)) for o in node.outputs]
        if all(g is None for g in gouts):
            continue
        gins = node.vjp(gouts)
        for inp, g in zip(node.inputs, gins):
            if inp is None or g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    return {p: grads.get(id(p), np.zeros_like(p.value)) for p in params}
