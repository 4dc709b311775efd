"""Tape-based reverse-mode differentiation over numpy arrays.

Ops only record onto a tape when one is active::

    with Tape() as tape:
        loss = model(x)
    tape.backward(loss)

Outside a tape every op is a plain numpy computation, which is what the
inference paths use.
"""
import threading

import numpy as np

_state = threading.local()


class NonFiniteError(FloatingPointError):
    pass


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records differentiable ops executed inside its ``with`` block.

    A tape is single-use and confined to the thread that opened it.
    """

    def __init__(self):
        self.nodes = []
        self._closed = False

    def __enter__(self):
        if self._closed:
            raise RuntimeError("tape already used")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape scopes closed out of order")
        stack.pop()
        self._closed = True
        return False

    def record(self, node):
        node.node_id = len(self.nodes)
        self.nodes.append(node)

    def backward(self, root, grad=None):
        """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if root.node_id is None or root.node_id >= len(self.nodes) or self.nodes[root.node_id] is not root:
            raise ValueError("root was not produced on this tape")
        seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=root.data.dtype)
        if seed.shape != root.data.shape:
            raise ValueError(f"seed grad shape {seed.shape} != root shape {root.data.shape}")
        upstream = {root.node_id: seed}
        for node in reversed(self.nodes[: root.node_id + 1]):
            g = upstream.pop(node.node_id, None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent.accumulate(pg)
                elif parent.node_id < len(self.nodes) and self.nodes[parent.node_id] is parent:
                    prev = upstream.get(parent.node_id)
                    upstream[parent.node_id] = pg if prev is None else prev + pg
                # intermediates from another tape act as constants here


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=np.float64):
        arr = np.array(data, dtype=dtype) if dtype is not None else np.asarray(data)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node_id = None
        self.name = name
        self._parents = ()
        self._backward = None

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, dtype=None)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar (implementations live in ops) ------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

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
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_result(data, parents, backward, check=True):
    """Wrap an op's output, recording it on the active tape when needed."""
    if check and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by op")
    out = Tensor(data, dtype=None)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        tape.record(out)
    return out


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)
