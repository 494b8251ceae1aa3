"""Tensor container and the operation record used for reverse-mode differentiation."""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_active_record: contextvars.ContextVar[Optional["Record"]] = contextvars.ContextVar(
    "voxkit_active_record", default=None
)


class AutodiffError(RuntimeError):
    pass


class Tensor:
    """Dense float array with an optional gradient buffer.

    Layout is row-major with the last axis fastest; 5-D model tensors are
    ``(N, C, z, y, x)``. The value buffer is treated as immutable once
    created; only ``grad`` is written by :meth:`Record.backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_is_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        if any(s < 1 for s in arr.shape):
            raise ValueError(f"all dimension sizes must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._is_leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the implementations live in ops.py
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Record:
    """Ordered list of executed operations (a tape).

    Use as a context manager; operations executed inside it whose inputs
    require gradients append a :class:`Node`. Records are per-thread: the
    active record is held in a context variable.
    """

    def __init__(self) -> None:
        self.nodes: list[Optional[Node]] = []
        self._outputs: dict[int, int] = {}
        self._token = None

    def __enter__(self) -> "Record":
        self._token = _active_record.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_record.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def append(self, node: Node) -> None:
        self._outputs[id(node.output)] = len(self.nodes)
        self.nodes.append(node)

    def __contains__(self, t: Tensor) -> bool:
        idx = self._outputs.get(id(t))
        return idx is not None and self.nodes[idx] is not None and self.nodes[idx].output is t

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

        Gradients from multiple uses of a tensor are summed. The record is
        consumed: saved activations are released as the sweep proceeds.
        """
        if loss.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss not in self:
            raise AutodiffError("loss tensor was not produced on this record")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for i in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[i]
            if node is None:
                continue
            self.nodes[i] = None
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise AutodiffError(
                        f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}"
                    )
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t.is_leaf:
                    leaves[key] = t
            del node, g, in_grads

        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = g.astype(t.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g
        self.nodes.clear()
        self._outputs.clear()


def backward(record: Record, loss: Tensor) -> None:
    record.backward(loss)


def active_record() -> Optional[Record]:
    return _active_record.get()


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def record_op(
    op: str,
    inputs: Sequence[Tensor],
    out: np.ndarray,
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap ``out`` in a Tensor and append it to the active record if needed.

    ``vjp`` maps the output cotangent to one cotangent per input (``None``
    where an input is not differentiable).
    """
    rec = _active_record.get()
    needs = rec is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        result._is_leaf = False
        rec.append(Node(op, tuple(inputs), result, vjp))
    return result
