"""Dense tensors plus reverse-mode automatic differentiation.

A Tensor wraps a numpy float32 array (float64 in the high-precision mode used
by gradient tests). Every differentiable op in `fewseg.tensor.ops` returns a
Tensor whose `_backward` closure pushes gradients into its parents; calling
`backward(loss)` walks the recorded graph in reverse topological order.

Gradients of intermediate nodes are dropped as soon as they have been
propagated, so peak memory during backward stays close to the forward peak.
"""

from __future__ import annotations

import numpy as np

from ..errors import DataError, ShapeError, StateError

DEFAULT_DTYPE = np.float32


def as_array(values, dtype=None, what="tensor"):
    """Convert external data to a float array, rejecting NaN/Inf."""
    arr = np.asarray(values, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{what} contains non-finite values")
    return arr


_GRAD_ENABLED = [True]


class no_grad:
    """Context that disables tape recording (inference mode): ops return
    plain tensors with no closures, so graphs cost nothing to free."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


class Tensor:
    """An n-d value node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, parents=()):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = parents

    @classmethod
    def of(cls, values, dtype=None):
        """Build a constant tensor from external data (finiteness-checked)."""
        return cls(as_array(values, dtype))

    @property
    def dims(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g):
        # Takes ownership of g when no grad exists yet; ops must not hand the
        # same array to two parents (see add()).
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(dims={tuple(self.dims)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named learnable tensor; its grad buffer is always allocated."""

    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(np.ascontiguousarray(data), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def accumulate_grad(self, g):
        self.grad += g

    def __repr__(self):
        return f"Parameter({self.name!r}, dims={tuple(self.dims)})"


def make_op_output(data, inputs):
    """Create the output node of an op; parents are the grad-requiring inputs.

    Under no_grad, outputs never require grad, so ops skip building their
    backward closures entirely.
    """
    if not _GRAD_ENABLED[0]:
        return Tensor(data)
    parents = tuple(t for t in inputs if isinstance(t, Tensor) and t.requires_grad)
    return Tensor(data, requires_grad=bool(parents), parents=parents)


def backward(loss):
    """Run reverse-mode differentiation from a scalar loss node.

    Parameters reached from `loss` receive accumulated gradients; every
    intermediate node's grad and closure are released on the way down.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got dims {tuple(loss.dims)}")
    if not loss.requires_grad:
        raise StateError("backward() called before any forward pass was recorded")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
        # Node's own grad is complete here (consumers already ran); free it.
        if not isinstance(node, Parameter):
            node.grad = None
        node._backward = None
        node._parents = ()
