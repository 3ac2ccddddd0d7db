"""Dense float64 tensors recorded on a define-by-run tape."""

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

_creation = itertools.count()
_grad_mode = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """A non-finite value reached an op that requires finite input."""


class ContractError(RuntimeError):
    """A caller violated an op's precondition (wrong mode, non-scalar loss, ...)."""


@dataclass(eq=False)
class TapeNode:
    """One recorded op: its inputs and a closure mapping output grad to input grads.

    ``backward_fn`` returns one array (or ``None``) per input, in order. Anything
    the rule needs from the forward pass lives in the closure.
    """

    op: str
    inputs: tuple
    backward_fn: Callable = field(repr=False)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "_id", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, _node=None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = _node
        self.name = name
        self._id = next(_creation)

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self):
        from . import ops

        return ops.sum(self)

    def backward(self):
        backward(self)


def parameter(data, name=None):
    """A leaf tensor that participates in gradient computation."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


@contextlib.contextmanager
def no_grad():
    """Record nothing on the tape (this thread only) while the block runs."""
    prev = getattr(_grad_mode, "off", False)
    _grad_mode.off = True
    try:
        yield
    finally:
        _grad_mode.off = prev


def make_result(data, op, inputs, backward_fn):
    """Wrap an op's output, recording a tape node if any input needs gradients."""
    if not getattr(_grad_mode, "off", False) and any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, _node=TapeNode(op, tuple(inputs), backward_fn))
    return Tensor(data)


def _reachable(root):
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        if t.node is not None:
            stack.extend(i for i in t.node.inputs if i.requires_grad)
    return seen


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every grad-requiring ancestor.

    Nodes are replayed in reverse creation order, which is a valid reverse
    topological order because an op's output is always created after its inputs.
    Calling twice without zeroing adds the gradients again.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward() expects a Tensor")
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")

    nodes = sorted(_reachable(loss).values(), key=lambda t: t._id, reverse=True)
    local = {loss._id: np.ones_like(loss.data)}
    for t in nodes:
        g = local.pop(t._id, None)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
        if t.node is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(f"{t.node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
            prev = local.get(inp._id)
            local[inp._id] = gi if prev is None else prev + gi
