"""Tensor, tape and reverse-mode differentiation.

Every primitive records a :class:`Node` on the active :class:`Tape` whenever one
of its inputs requires a gradient. A node's backward rule is itself written in
terms of recorded primitives, so running :func:`backward` with
``create_graph=True`` leaves a differentiable gradient on the tape and a second
pass through it yields second derivatives.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from collections.abc import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand extents are invalid for a primitive."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or infinity."""


class GradientError(RuntimeError):
    """Raised for invalid differentiation requests."""


_tape_ids = itertools.count(1)
_state = threading.local()


def _stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def _activate(tape: Tape | None):
    stack = _stack()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


def no_grad():
    """Context manager that suspends recording on the current thread."""
    return _activate(None)


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward

    def __repr__(self):
        shapes = ", ".join(str(t.shape) for t in self.inputs)
        return f"Node({self.op}: ({shapes}) -> {self.output.shape})"


class Tape:
    """Append-only record of primitive applications.

    A tape belongs to the thread that activates it. Nodes are appended in
    execution order, so the list is topologically sorted by construction.
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


class Tensor:
    """Dense array taking part in differentiation."""

    __slots__ = ("data", "requires_grad", "tape_id", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tape_id = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}{flag})"

    # Operator sugar, dispatched to the primitive functions in ``ops``.
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
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

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

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


# Finite-value check on every primitive output. Disabling it trades the
# invariant for speed; nothing in the library turns it off.
check_finite = True

BackwardFn = Callable[[Tensor, Sequence[bool]], Sequence[Tensor | None]]


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor],
                backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the result of ``op`` and record it when needed."""
    if check_finite and not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_id = tape.id
        tape.nodes.append(Node(op, tuple(inputs), out, backward))
    return out


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | object,
             create_graph: bool = False, allow_unused: bool = False):
    """Gradients of scalar ``loss`` with respect to every tensor in ``wrt``.

    ``wrt`` may be a sequence of tensors or a ``ParamSet``; the result has the
    same form. With ``create_graph`` the gradient computation is itself
    recorded on ``tape``. A ``wrt`` entry that did not contribute to ``loss``
    raises :class:`GradientError` unless ``allow_unused`` is set, in which case
    its gradient is zero.
    """
    from .paramset import ParamSet

    as_paramset = isinstance(wrt, ParamSet)
    targets = list(wrt.values()) if as_paramset else list(wrt)
    if loss.shape != ():
        raise GradientError(f"backward: loss must be scalar, got shape {list(loss.shape)}")
    for t in targets:
        if not t.requires_grad:
            raise GradientError("backward: wrt entry does not require grad")

    # Forward sweep: tensors that depend on some wrt entry.
    n = len(tape.nodes)
    nodes = tape.nodes[:n]
    dep = {id(t) for t in targets}
    relevant = []
    for node in nodes:
        if any(id(t) in dep for t in node.inputs):
            dep.add(id(node.output))
            relevant.append(node)
    if id(loss) not in dep:
        if not allow_unused:
            raise GradientError("backward: loss does not depend on any wrt entry "
                                "on this tape")
        grads = [Tensor(np.zeros_like(t.data)) for t in targets]
        return wrt.with_tensors(grads) if as_paramset else grads

    target_ids = {id(t) for t in targets}
    acc: dict[int, Tensor] = {id(loss): Tensor(np.ones_like(loss.data))}
    with _activate(tape if create_graph else None):
        for node in reversed(relevant):
            key = id(node.output)
            g = acc.get(key) if key in target_ids else acc.pop(key, None)
            if g is None:
                continue
            needs = [id(t) in dep for t in node.inputs]
            for inp, need, gi in zip(node.inputs, needs, node.backward(g, needs)):
                if not need or gi is None:
                    continue
                prev = acc.get(id(inp))
                acc[id(inp)] = gi if prev is None else prev + gi

    grads = []
    for t in targets:
        g = acc.get(id(t))
        if g is None:
            if not allow_unused:
                raise GradientError("backward: a wrt entry is absent from the "
                                    "recorded graph of the loss")
            g = Tensor(np.zeros_like(t.data))
        grads.append(g)
    return wrt.with_tensors(grads) if as_paramset else grads
