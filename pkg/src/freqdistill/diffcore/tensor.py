"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a :class:`Node` stamped with a
monotonically increasing sequence number.  ``Tensor.backward`` gathers the
nodes reachable from the output into a :class:`Tape` and replays them in
exact reverse execution order, accumulating gradients additively.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "DimensionError",
    "NonFiniteError",
    "StateError",
    "no_grad",
    "grad_enabled",
    "tensor",
    "zeros",
    "ones",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient contains NaN or Inf."""


class StateError(RuntimeError):
    """An object is not in the state an operation requires."""


_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the enclosed block (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Node:
    """One recorded operation: its inputs, output and vector-Jacobian product."""

    __slots__ = ("op", "inputs", "output", "vjp", "seq")

    def __init__(self, op: str, inputs: tuple, output: "Tensor", vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.seq = next(_seq)

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tape:
    """Ordered record of the operations that produced a tensor."""

    def __init__(self, ops: list[Node]):
        self.ops = ops

    @classmethod
    def collect(cls, output: "Tensor") -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [output]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.ops)

    def replay(self, output: "Tensor", grad: np.ndarray) -> list[Node]:
        """Propagate ``grad`` from ``output`` back to the leaves.

        Returns the nodes in the order they were visited.
        """
        grads: dict[int, np.ndarray] = {id(output): grad}
        visited = []
        for node in reversed(self.ops):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            visited.append(node)
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                _check_finite(ig, f"backward of {node.op}")
                if inp._node is None:
                    inp._accumulate(ig)
                else:
                    key = id(inp)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig
        return visited


class Tensor:
    """A dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    # -- construction helpers -------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, inputs: Sequence["Tensor"], vjp: Callable) -> "Tensor":
        data = np.asarray(data, dtype=np.float64)
        _check_finite(data, op)
        out = cls.__new__(cls)
        data.setflags(write=False)
        out.data = data
        out.grad = None
        out.name = None
        out._node = None
        out.requires_grad = False
        if grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._node = Node(op, tuple(inputs), out, vjp)
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

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
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.name = None
        out._node = None
        out.requires_grad = False
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- gradient bookkeeping ---------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> Tape:
        """Run reverse-mode differentiation from this tensor.

        ``grad`` defaults to ones for a single-element tensor.  Leaf
        gradients accumulate into ``.grad``; the replayed tape is returned.
        """
        if not self.requires_grad:
            raise StateError("tensor does not require grad")
        if grad is None:
            if self.size != 1:
                raise StateError("grad must be given for non-scalar outputs")
            g = np.ones(self.shape)
        else:
            g = np.asarray(grad, dtype=np.float64)
            if g.shape != self.shape:
                raise DimensionError(f"seed gradient shape {g.shape} != {self.shape}")
        if self._node is None:
            self._accumulate(g)
            return Tape([])
        tape = Tape.collect(self)
        tape.replay(self, g)
        return tape

    # -- operator sugar; implementations live in ops.py -------------------
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
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

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

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def sigmoid(self):
        from . import ops
        return ops.sigmoid(self)

    def relu(self):
        from . import ops
        return ops.relu(self)

    def abs(self):
        from . import ops
        return ops.abs(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameters_of(items: Iterable) -> list[Tensor]:
    return [t for t in items if isinstance(t, Tensor) and t.requires_grad]
