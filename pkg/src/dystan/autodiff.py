"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every differentiable value is a :class:`Tensor`; every operation is a
:class:`Function` node recording its parents, so ``backward(loss)`` can
replay the graph in reverse topological order and accumulate gradients
additively across fan-out. 64-bit floats throughout, which keeps central
finite differences sharp enough to verify every op to <1e-4 relative.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import DimensionError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (eval-mode forward passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An n-d float64 array participating in the reverse-mode graph."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._ctx = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return Add.apply(self, _wrap(other))

    __radd__ = __add__

    def __neg__(self):
        return Neg.apply(self)

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(_wrap(other)))

    def __rsub__(self, other):
        return Add.apply(_wrap(other), Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return MatMul.apply(self, _wrap(other))

    def __getitem__(self, key):
        return GetItem.apply(self, key=key)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes)

    def backward(self):
        backward(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Function:
    """One node of the computation graph.

    Subclasses implement ``forward`` (ndarray in/out, may stash state on
    ``self``) and ``backward`` (returns one gradient per parent, ``None``
    where a parent is not differentiable).
    """

    def __init__(self, *parents):
        self.parents = parents

    @classmethod
    def apply(cls, *inputs, **kwargs):
        node = cls(*inputs)
        out_data = node.forward(*(t.data for t in inputs), **kwargs)
        requires = _grad_enabled and any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=requires)
        if requires:
            out._ctx = node
        return out

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def backward(loss):
    """Populate ``grad`` on every reachable requires_grad tensor.

    Reverse topological traversal; gradients accumulate additively when a
    tensor fans out into several consumers.
    """
    if loss.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            topo.append(tensor)
            continue
        if id(tensor) in visited or tensor._ctx is None:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        for parent in tensor._ctx.parents:
            stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for tensor in reversed(topo):
        grads = tensor._ctx.backward(tensor.grad)
        for parent, g in zip(tensor._ctx.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


# -- elementwise / linalg primitives ----------------------------------------


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        sa, sb = self.shapes
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            _unbroadcast(grad * self.b, self.a.shape),
            _unbroadcast(grad * self.a, self.b.shape),
        )


class MatMul(Function):
    """Matrix product; supports stacked (batched) operands like np.matmul."""

    def forward(self, a, b):
        if a.ndim < 1 or b.ndim < 1:
            raise DimensionError("matmul operands must have ndim >= 1")
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise DimensionError(
                f"matmul inner dimensions disagree: {a.shape} @ {b.shape}"
            )
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.a, self.b
        if a.ndim == 1 or b.ndim == 1:
            raise UsageError("matmul backward supports ndim >= 2 operands only")
        ga = np.matmul(grad, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), grad)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


class ReLU(Function):
    def forward(self, a):
        out = np.maximum(a, 0.0)
        self.mask = a > 0.0
        return out

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, a):
        self.out = 1.0 / (1.0 + np.exp(-a))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.in_shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        return a.sum(axis=axis, keepdims=keepdims)

    def backward(self, grad):
        return (_spread(grad, self.in_shape, self.axis, self.keepdims),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.in_shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        out = a.mean(axis=axis, keepdims=keepdims)
        self.count = a.size / max(out.size, 1)
        return out

    def backward(self, grad):
        g = _spread(grad, self.in_shape, self.axis, self.keepdims)
        return (g / self.count,)


def _spread(grad, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(grad, shape).astype(np.float64, copy=True)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        grad = np.expand_dims(grad, axes)
    return np.broadcast_to(grad, shape).astype(np.float64, copy=True)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.ascontiguousarray(a.transpose(axes))

    def backward(self, grad):
        return (grad.transpose(np.argsort(self.axes)),)


class GetItem(Function):
    """Basic (non-repeating) indexing: slices and integers."""

    def forward(self, a, key):
        self.in_shape = a.shape
        self.key = key
        return a[key].copy()

    def backward(self, grad):
        out = np.zeros(self.in_shape)
        out[self.key] = grad
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Softmax(Function):
    """Numerically stable softmax along one axis; outputs sum to 1."""

    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        inner = (grad * s).sum(axis=self.axis, keepdims=True)
        return (s * (grad - inner),)


class Dropout(Function):
    """Inverted dropout: train-mode scaling by 1/(1-p), eval is identity."""

    def forward(self, a, p, rng):
        keep = rng.random(a.shape) >= p
        self.scale = keep / (1.0 - p)
        return a * self.scale

    def backward(self, grad):
        return (grad * self.scale,)


# -- functional wrappers -----------------------------------------------------


def relu(x):
    return ReLU.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def tanh(x):
    return Tanh.apply(x)


def exp(x):
    return Exp.apply(x)


def log(x):
    return Log.apply(x)


def softmax(x, axis=-1):
    return Softmax.apply(x, axis=axis)


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def dropout(x, p, train, rng=None):
    """Zero elements with probability ``p`` and rescale survivors.

    Eval mode (and p == 0) is an exact identity.
    """
    from .errors import ConfigError

    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise UsageError("train-mode dropout needs an rng")
    return Dropout.apply(x, p=p, rng=rng)
