"""Dense NCHW tensors with a small reverse-mode autograd engine.

Every differentiable op returns a new :class:`Tensor` that remembers the
node which produced it.  ``backward(loss)`` collects those nodes into a tape
(reverse topological order), runs each backward rule exactly once and then
releases the tape so intermediate arrays can be freed.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class AutogradError(RuntimeError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One recorded op: its inputs and the rule mapping output grad to input grads."""

    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.consumed = False

    def release(self):
        self.inputs = ()
        self.backward_fn = None
        self.consumed = True


class Tensor:
    """A value array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                               and data.dtype in (np.float32, np.float64)
                                               else DEFAULT_DTYPE))
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """A named trainable tensor; its grad buffer is always allocated."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.data.setflags(write=True)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def assign(self, values):
        """Overwrite values in place; the shape is fixed at construction."""
        values = np.asarray(values, dtype=self.data.dtype)
        if values.shape != self.data.shape:
            raise ShapeError(f"assign[{self.name}]", self.data.shape, values.shape)
        self.data[...] = values

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor],
                backward_fn: Callable) -> Tensor:
    """Wrap ``data`` and, if any input needs grads, attach a tape node.

    ``backward_fn(grad_out)`` must return one array (or None) per input.
    """
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, backward_fn)
    return out


def _binary_operands(op: str, a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(op, a.shape, b.shape)
    return a, b


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # scalar operand broadcast over the other: sum everything back
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands("add", a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands("sub", a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return make_result("mul", ad * bd, (a, b), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_result("relu", x.data * mask, (x,), backward)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return make_result("sum", np.asarray(x.data.sum()), (x,), backward)


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size

    def backward(g):
        return (np.full(shape, g / n, dtype=x.data.dtype),)

    return make_result("mean", np.asarray(x.data.mean()), (x,), backward)


def mean_square(x) -> Tensor:
    """Mean of squared entries, a scalar."""
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("mean_square", x.shape)
    xd = x.data

    def backward(g):
        return (g * 2.0 * xd / xd.size,)

    return make_result("mean_square", np.asarray(np.mean(xd * xd)), (x,), backward)


def concat_channels(tensors: Sequence) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat_channels needs at least one tensor")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError("concat_channels", ref, t.shape)
    splits = np.cumsum([t.shape[1] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return make_result("concat_channels", np.concatenate([t.data for t in ts], axis=1),
                       ts, backward)


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"slice_channels[{start}:{stop}]", x.shape)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return make_result("slice_channels", x.data[:, start:stop].copy(), (x,), backward)


def broadcast_channels(x, channels: int) -> Tensor:
    """Repeat an n×1×h×w map across ``channels`` channels."""
    x = as_tensor(x)
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ShapeError("broadcast_channels", x.shape)

    def backward(g):
        return (g.sum(axis=1, keepdims=True),)

    data = np.repeat(x.data, channels, axis=1)
    return make_result("broadcast_channels", data, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return make_result("reshape", x.data.reshape(shape), (x,), backward)


def _build_tape(loss: Tensor) -> list[Tensor]:
    """Non-leaf tensors reachable from ``loss``, outputs before their inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if t._node is None or id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t._node.inputs:
            if inp._node is not None and id(inp) not in seen:
                stack.append((inp, False))
    order.reverse()
    return order


def backward(loss: Tensor, params: Optional[Iterable[Parameter]] = None) -> None:
    """Fill ``grad`` of every leaf reachable from the scalar ``loss``.

    Grads are overwritten, not accumulated.  Any ``params`` passed in that the
    loss does not depend on get zero grads.  The graph is released afterwards,
    so a second call on the same loss raises.
    """
    if loss.size != 1:
        raise AutogradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    node = loss._node
    if node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return
    if node.consumed:
        raise AutogradError("graph already consumed by an earlier backward(); "
                            "run a new forward pass")
    tape = _build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for t in tape:
        g = grads.pop(id(t), None)
        n = t._node
        if g is None:
            continue
        for inp, ig in zip(n.inputs, n.backward_fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + ig if key in grads else ig
            if inp._node is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
    for t in tape:
        t._node.release()
