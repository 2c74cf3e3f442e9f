"""Tensor container and the backward tape.

A :class:`Tape` is an append-only record of differentiable operations. Ops
only record while a tape is active on the current thread (``with Tape():``),
so inference code such as feature extraction never builds a graph.
"""

from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, NonFiniteError

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Leaf tensors created with ``requires_grad=True`` receive ``.grad`` during
    :func:`backward`. Tensors produced by a recorded op carry ``node_id``, the
    index of the producing node on their tape. The tape is referenced weakly,
    so a graph (and its saved activations) is freed as soon as its tape goes
    out of scope, without waiting for the cycle collector.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape = None
        self.node_id: int | None = None
        self.name = name

    @property
    def tape(self) -> Optional["Tape"]:
        return self._tape() if self._tape is not None else None

    @tape.setter
    def tape(self, value: Optional["Tape"]) -> None:
        self._tape = weakref.ref(value) if value is not None else None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no tape history, no gradient."""
        return Tensor(self.data.copy())

    @property
    def is_taped(self) -> bool:
        return self.node_id is not None

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Append-only operation record; usable as a context manager."""

    __slots__ = ("nodes", "__weakref__")

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        output.tape = self
        output.node_id = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise ContractError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for idx in range(loss.node_id, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.node_id is not None and inp.tape is self:
                    if inp.node_id in grads:
                        grads[inp.node_id] = grads[inp.node_id] + ig
                    else:
                        grads[inp.node_id] = ig
                elif inp.node_id is None:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``."""
    if loss.tape is None:
        raise ContractError("loss is not on a tape; run the forward pass inside `with Tape():`")
    loss.tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr
