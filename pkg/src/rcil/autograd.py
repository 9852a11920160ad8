"""Reverse-mode autodiff over dense float64 numpy arrays.

A :class:`Tensor` wraps an ndarray and records the operations applied to it.
``backward()`` on a scalar walks the tape in reverse topological order.

Gradient contract: leaf gradients accumulate across ``backward()`` calls
until :meth:`Tensor.zero_grad` resets them; gradients of interior nodes are
scratch space and are cleared at the start of every ``backward()``.
Everything is float64 and single-threaded.
"""

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (teacher passes, eval)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- graph construction ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self._backward is None

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar")
        topo, seen, stack = [], set(), [self]
        while stack:
            node = stack[-1]
            if id(node) in seen:
                stack.pop()
                continue
            pending = [p for p in node._parents if id(p) not in seen]
            if pending:
                stack.extend(pending)
            else:
                seen.add(id(node))
                topo.append(node)
                stack.pop()
        for node in topo:
            if not node.is_leaf:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data, parents, backward_fn):
    """Wrap an op result, recording the tape edge when grads are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn(out)
    return out


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` by summing broadcast axes."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def bw(out):
        def run(g):
            a.accumulate(_unbroadcast(g, a.data.shape))
            b.accumulate(_unbroadcast(g, b.data.shape))
        return run

    return make(a.data + b.data, (a, b), bw)


def mul(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _wrap(a)
        s = float(b)

        def bw_scalar(out):
            def run(g):
                a.accumulate(g * s)
            return run

        return make(a.data * s, (a,), bw_scalar)

    a, b = _wrap(a), _wrap(b)

    def bw(out):
        def run(g):
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))
        return run

    return make(a.data * b.data, (a, b), bw)


def square(a):
    a = _wrap(a)

    def bw(out):
        def run(g):
            a.accumulate(g * (2.0 * a.data))
        return run

    return make(a.data * a.data, (a,), bw)


def sqrt(a):
    """Elementwise square root; the derivative at exactly 0 is taken as 0."""
    a = _wrap(a)
    root = np.sqrt(a.data)

    def bw(out):
        def run(g):
            safe = np.where(root > 0.0, root, 1.0)
            a.accumulate(np.where(root > 0.0, 0.5 * g / safe, 0.0))
        return run

    return make(root, (a,), bw)


def log(a):
    a = _wrap(a)

    def bw(out):
        def run(g):
            a.accumulate(g / a.data)
        return run

    return make(np.log(a.data), (a,), bw)


def exp(a):
    a = _wrap(a)
    e = np.exp(a.data)

    def bw(out):
        def run(g):
            a.accumulate(g * out.data)
        return run

    return make(e, (a,), bw)


def relu(a):
    a = _wrap(a)

    def bw(out):
        def run(g):
            a.accumulate(g * (a.data > 0.0))
        return run

    return make(np.maximum(a.data, 0.0), (a,), bw)


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)

    def bw(out):
        def run(g):
            if axis is None:
                a.accumulate(np.broadcast_to(g, a.data.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate(np.broadcast_to(gg, a.data.shape))
        return run

    return make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()
