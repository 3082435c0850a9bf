"""Tensors, parameters and the recording tape.

A :class:`Tape` records every primitive executed while it is active. Tensors
created outside a tape carry no history, so evaluation code paths simply skip
the ``with Tape()`` block.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


class UsageError(RuntimeError):
    """Raised when the tape is driven in an invalid order."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.writeable:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = requires_grad

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
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the primitives live in dgpvae.autodiff.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


class Parameter(Tensor):
    """A trainable tensor with a stable name and an accumulated gradient."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of primitive executions.

    Nodes are appended in execution order, which is a topological order of the
    computation graph; :meth:`backward` walks it in reverse exactly once.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._outer: Tape | None = None
        self._closed = False

    def __enter__(self) -> "Tape":
        self._outer = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._outer
        self._closed = True

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, output: Tensor, seed=None) -> dict[str, np.ndarray]:
        """Propagate ``seed`` from ``output`` back to every recorded input.

        Populates ``Parameter.grad`` (overwriting) for each parameter reached
        and returns ``{parameter name: gradient}``.
        """
        if not self.nodes:
            raise UsageError("backward called on an empty tape; run the forward pass first")
        if not any(n.output is output for n in self.nodes):
            raise UsageError("output tensor was not produced on this tape")
        if seed is None:
            if output.size != 1:
                raise UsageError(f"seed required for non-scalar output of shape {output.shape}")
            seed = np.ones_like(output.data)
        seed = np.asarray(seed, dtype=DTYPE)
        if seed.shape != output.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match output shape {output.shape}")

        grads: dict[int, np.ndarray] = {id(output): seed}
        params: dict[int, Parameter] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}"
                    )
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if isinstance(inp, Parameter):
                    params[key] = inp

        out: dict[str, np.ndarray] = {}
        for key, p in params.items():
            g = grads.get(key, np.zeros_like(p.data))
            p.grad = np.array(g, dtype=DTYPE)
            out[p.name] = p.grad
        return out


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data`` and, when a tape is active and any input needs
    gradients, append the node to it."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(Node(out, tuple(inputs), backward, op))
    return out


def no_history(x: Tensor) -> Tensor:
    """Detach ``x`` from any recorded history."""
    return Tensor(x.data)
