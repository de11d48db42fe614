"""A small reverse-mode tape over numpy arrays with higher-order support.

Every backward rule is written with the same differentiable operations it
differentiates, so ``grad(..., create_graph=True)`` returns tensors that can be
differentiated again. This is what the exact second-order meta-gradient needs.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import kernels

_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def set_grad_enabled(flag: bool):
    prev = is_recording()
    _state.enabled = bool(flag)
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# -- broadcasting helpers ---------------------------------------------------


def sum_to(x: Tensor, shape) -> Tensor:
    """Sum ``x`` down to a broadcast-compatible ``shape``."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True).reshape(shape)
    src_shape = x.shape
    return _node(data, (x,), lambda g: (broadcast_to(g, src_shape),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src_shape = x.shape
    data = np.broadcast_to(x.data, shape)
    return _node(data, (x,), lambda g: (sum_to(g, src_shape),))


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(g, b.shape) if b.requires_grad else None,
        )

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(neg(g), b.shape) if b.requires_grad else None,
        )

    return _node(a.data - b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            sum_to(mul(g, b), a.shape) if a.requires_grad else None,
            sum_to(mul(g, a), b.shape) if b.requires_grad else None,
        )

    return _node(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = sum_to(div(g, b), a.shape)
        if b.requires_grad:
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _node(a.data / b.data, (a, b), backward)


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def matmul(a, b) -> Tensor:
    """2-D product, or a batched product with identical leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul shapes {a.shape} and {b.shape} are not supported")

    def backward(g):
        return (
            matmul(g, _swap_last(b)) if a.requires_grad else None,
            matmul(_swap_last(a), g) if b.requires_grad else None,
        )

    return _node(a.data @ b.data, (a, b), backward)


# -- elementwise nonlinearities ---------------------------------------------


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = _node(np.tanh(x.data), (x,), None)
    if out.requires_grad:
        out._backward = lambda g: (mul(g, sub(1.0, mul(out, out))),)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    data = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    out = _node(data, (x,), None)
    if out.requires_grad:
        out._backward = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    gate = Tensor((x.data > 0).astype(np.float64))
    return _node(x.data * gate.data, (x,), lambda g: (mul(g, gate),))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (div(g, x),))


# -- reductions and shape ops -----------------------------------------------


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    src_shape = x.shape
    if axis is None:
        kept = (1,) * x.ndim
    else:
        axes = {a % x.ndim for a in (axis if isinstance(axis, tuple) else (axis,))}
        kept = tuple(1 if i in axes else s for i, s in enumerate(src_shape))

    def backward(g):
        return (broadcast_to(reshape(g, kept), src_shape),)

    return _node(data, (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src_shape = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (reshape(g, src_shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (transpose(g, inverse),))


def take_range(x, start, stop) -> Tensor:
    """Contiguous slice of a 1-D tensor."""
    x = as_tensor(x)
    n = x.shape[0]
    return _node(x.data[start:stop], (x,), lambda g: (embed_range(g, start, n),))


def embed_range(x, start, n) -> Tensor:
    """Place a 1-D tensor at ``start`` inside a zero vector of length ``n``."""
    x = as_tensor(x)
    stop = start + x.shape[0]
    data = np.zeros(n)
    data[start:stop] = x.data
    return _node(data, (x,), lambda g: (take_range(g, start, stop),))


def frame(x, window, hop) -> Tensor:
    """(N, T) -> zero-padded frames (N, F, window)."""
    x = as_tensor(x)
    length = x.shape[1]
    return _node(
        kernels.frame(x.data, window, hop),
        (x,),
        lambda g: (overlap_add(g, hop, length),),
    )


def overlap_add(x, hop, length) -> Tensor:
    """(N, F, W) -> (N, length); the adjoint of :func:`frame`."""
    x = as_tensor(x)
    window = x.shape[2]
    return _node(
        kernels.overlap_add(x.data, hop, length),
        (x,),
        lambda g: (frame(g, window, hop),),
    )


# -- differentiation ---------------------------------------------------------


def _toposort(root: Tensor):
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        for p in parents:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def grad(output: Tensor, inputs, create_graph=False):
    """Gradients of scalar ``output`` with respect to each tensor in ``inputs``.

    With ``create_graph`` the returned tensors are themselves recorded on the
    tape. Inputs that do not influence the output get zero gradients.
    """
    if output.data.size != 1:
        raise ValueError("grad needs a scalar output")
    inputs = list(inputs)
    wanted = {id(t) for t in inputs}
    found = {}
    if output.requires_grad:
        grads = {id(output): Tensor(np.ones_like(output.data))}
        with set_grad_enabled(create_graph):
            for node in reversed(_toposort(output)):
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                if id(node) in wanted:
                    found[id(node)] = g
                if not node._parents:
                    continue
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else add(grads[key], pg)
    return [found.get(id(t), Tensor(np.zeros_like(t.data))) for t in inputs]
