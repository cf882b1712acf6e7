"""Reverse-mode gradient recording.

Operations in :mod:`lcaenet.nn.functional` record themselves on the innermost
active :class:`Tape` whenever one of their inputs requires a gradient.
Replaying the tape backward from a scalar yields gradients for every leaf
tensor that asked for one::

    with Tape() as tape:
        loss = F.sum(F.relu(x))
    grads = tape.backward(loss)
    grads[x]
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import TapeError

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """An ndarray plus the bookkeeping needed to differentiate through it.

    Hashing is by identity so tensors can key gradient dictionaries.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the functional module holds the real implementations
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

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: VJP


class Tape:
    """Records differentiable operations executed inside its ``with`` block.

    A tape can be replayed exactly once; a second :meth:`backward` raises
    :class:`~lcaenet.errors.TapeError`.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("cannot record on a tape that has already been replayed")
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted: tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple, vjp: VJP) -> None:
        if self._consumed:
            raise TapeError("tape already replayed")
        self._nodes.append(_Node(out, inputs, vjp))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of ``loss`` with respect to every leaf that requires one.

        ``seed`` defaults to ones and must match ``loss``'s shape when given,
        which turns the result into a vector-Jacobian product.
        """
        if self._consumed:
            raise TapeError("tape has already been replayed; record a fresh forward pass")
        if not isinstance(loss, Tensor) or not loss.requires_grad:
            raise TapeError("loss does not depend on any tensor that requires a gradient")
        produced = {id(node.out) for node in self._nodes}
        if id(loss) not in produced:
            raise TapeError("loss was not recorded on this tape")
        self._consumed = True

        if seed is None:
            seed = np.ones_like(loss.data)
        elif np.shape(seed) != loss.shape:
            raise TapeError(f"seed shape {np.shape(seed)} != loss shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        leaves: dict[int, Tensor] = {}

        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if t.shape != gi.shape:
                    raise TapeError(f"gradient shape {gi.shape} does not match tensor shape {t.shape}")
                grads[key] = grads[key] + gi if key in grads else gi
                if key not in produced:
                    leaves[key] = t

        self._nodes.clear()
        return {t: grads[k] for k, t in leaves.items() if k in grads}


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Functional spelling of :meth:`Tape.backward`."""
    return tape.backward(loss)


class FlopCounter:
    """Accumulates the floating-point operation counts reported by ops.

    Counting convention: every multiply-accumulate is two operations; bias
    adds, elementwise adds/multiplies and activations are one per element;
    batch norm is two per element (scale and shift, with the normalisation
    folded in as at inference time).
    """

    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def __enter__(self) -> "FlopCounter":
        if not hasattr(_local, "counters"):
            _local.counters = []
        _local.counters.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.counters.pop()

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


def count(op: str, n: int) -> None:
    counters = getattr(_local, "counters", None)
    if counters:
        counters[-1].add(op, n)
