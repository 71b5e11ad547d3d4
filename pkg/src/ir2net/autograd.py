"""Tape-based reverse-mode automatic differentiation over numpy arrays."""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_DTYPES = {"standard": np.float32, "wide": np.float64}
_state = {"dtype": np.float32, "grad_enabled": True}


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class ConfigError(ValueError):
    """An operation or layer was configured with impossible parameters."""


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(mode: str):
    """Switch the dtype of newly created tensors ("standard" = float32, "wide" = float64)."""
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}")
    prev = _state["dtype"]
    _state["dtype"] = _DTYPES[mode]
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def grad_enabled() -> bool:
    return _state["grad_enabled"]


class Tensor:
    """Dense float array that may participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic is delegated to ir2net.functional to keep this module op-free
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


class Node:
    __slots__ = ("op", "out", "inputs", "parents", "backward_fn", "visits")

    def __init__(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.op = op
        self.out = out
        self.inputs = tuple(inputs)
        # unique parents, each recorded once even for ops like x * x
        seen: dict[int, Tensor] = {}
        for t in self.inputs:
            if t.requires_grad:
                seen.setdefault(id(t), t)
        self.parents = tuple(seen.values())
        self.backward_fn = backward_fn
        self.visits = 0


class Tape:
    """Append-only record of differentiable operations in execution order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


_tape = Tape()


def get_tape() -> Tape:
    return _tape


@contextlib.contextmanager
def fresh_tape():
    """Run a block with a new tape; the previous one is restored afterwards."""
    global _tape
    prev = _tape
    _tape = Tape()
    try:
        yield _tape
    finally:
        _tape.reset()
        _tape = prev


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap `data` as the output of `op`; records a tape node if any input needs grad.

    `backward_fn(grad_out)` must return one gradient (or None) per entry of `inputs`.
    """
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        node = Node(op, out, inputs, backward_fn)
        out._node = node
        _tape.record(node)
    return out


def backward(loss: Tensor, keep_tape: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf reachable from `loss`."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise ValueError("loss is not attached to the tape")
    tape = _tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.visits += 1
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}")
            if t._node is None:
                t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
    if not keep_tape:
        tape.reset()
