"""Dense tensors with a reverse-mode tape.

Each op that touches a tensor requiring grad records a node holding its
parents and a closure mapping the output gradient to parent gradients.
``backward`` walks the recorded graph once in reverse topological order and
then frees it, so a second call on the same loss is an error.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True
check_finite = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def backward(self, grad=None):
        backward(self, grad)

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)

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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def make_node(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    """Wrap an op result; record it on the tape if any parent needs grad.

    ``backward_fn(grad)`` must return one gradient (or None) per parent,
    each with that parent's shape.
    """
    if check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen and p._op is not None:
                stack.append((p, False))
    return order


class GraphFreedError(RuntimeError):
    pass


def backward(loss: Tensor, grad=None) -> int:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad``; returns the number of nodes visited."""
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise RuntimeError("loss is not attached to any tensor that requires grad")
    if loss._op is not None and loss._backward is None:
        raise GraphFreedError("graph already consumed by a previous backward()")
    if loss._op is None:
        loss.grad = grad if loss.grad is None else loss.grad + grad
        return 0

    order = _toposort(loss)
    grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    visited = 0
    for node in reversed(order):
        g = grads.pop(id(node), None)
        fn = node._backward
        if fn is None:
            raise GraphFreedError("graph already consumed by a previous backward()")
        node._backward = None
        visited += 1
        if g is None:
            continue
        parent_grads = fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise AssertionError(f"{node._op}: grad shape {pg.shape} != parent shape {p.shape}")
            if p._op is None:
                p.grad = pg.astype(p.dtype, copy=True) if p.grad is None else p.grad + pg
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
    return visited
