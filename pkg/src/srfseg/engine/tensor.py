"""Reverse-mode autodiff on dense numpy arrays.

A Tensor wraps an ndarray plus the bookkeeping needed to replay the chain
rule: the tensors it was computed from and a closure mapping the output
gradient to per-parent gradients.  Graphs are built eagerly by the ops in
ops.py (and by the handful of custom primitives elsewhere in the package)
and torn down by `backward`.

Training runs in float32; gradient checking flips the global default to
float64 via `precision`, because central differences at 1e-5 are meaningless
in single precision.
"""

import contextlib
import itertools

import numpy as np

from ..errors import ShapeError

_default_dtype = np.float32

_node_counter = itertools.count(1)


def get_dtype():
    return _default_dtype


def set_dtype(dtype):
    """Set the global default dtype ("float32" or "float64")."""
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _default_dtype = dt.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the global default dtype."""
    old = _default_dtype
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


class Tensor:
    """Dense array node in the autodiff graph.

    `data` is never mutated by ops; parameter updates (the one sanctioned
    in-place write) happen between graphs.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = next(_node_counter)
        self._parents = ()
        self._bwd = None

    @classmethod
    def _wrap(cls, data, parents, bwd):
        """Build an op output without re-coercing dtype.

        `bwd(grad_out)` must return one gradient array (or None) per parent.
        The graph edge is only recorded when some parent actually needs it.
        """
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node_id = next(_node_counter)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._bwd = bwd
        else:
            out.requires_grad = False
            out._parents = ()
            out._bwd = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; implementations live in ops.py to keep this file
    # free of numerical code
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

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum_(self, axis=axis, keepdims=keepdims)

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
        return ops.transpose(self, axes)


def as_tensor(x):
    """Wrap scalars/arrays as constant Tensors; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _toposort(root):
    """Iterative post-order over the graph rooted at `root`."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Propagate d(loss)/d(node) through the graph below `loss`.

    Returns the gradient map {node_id: Tensor} for every tensor that
    requires grad and received a gradient; the same arrays are left on the
    tensors' `.grad` for convenience.  Gradients of repeated uses sum.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    grads = {loss.node_id: np.ones_like(loss.data)}
    gmap = {}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g
            gmap[node.node_id] = Tensor._wrap(g, (), None)
        if node._bwd is None:
            continue
        parent_grads = node._bwd(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(parent.node_id)
            if acc is None:
                grads[parent.node_id] = pg
            else:
                # accumulation order is the reversed topological order,
                # which is fixed for a fixed graph: reproducible sums
                grads[parent.node_id] = acc + pg
    return gmap
