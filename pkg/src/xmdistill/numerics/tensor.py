"""Immutable float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a read-only numpy array. Leaves created with
``requires_grad=True`` are *tracked*; while a :class:`GradTape` is active,
every primitive whose inputs include a tracked tensor is recorded and its
output is tracked too. :func:`backward` replays the tape in reverse once and
returns a ``{leaf: gradient}`` mapping. Untracked tensors never appear in it.

Example::

    x = Tensor([1.0, -2.0], requires_grad=True)
    with GradTape() as tape:
        loss = (x * x).sum()
    grads = backward(tape, loss)   # grads[x] == [2., -4.]
"""

from __future__ import annotations

import threading

import numpy as np

from ..errors import ContractError, DimensionError, DomainError, InputTooShortError
from . import kernels

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def _current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array, immutable once built."""

    __slots__ = ("data", "requires_grad", "_tracked")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor data contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tracked = self.requires_grad

    @classmethod
    def _wrap(cls, arr, tracked=False):
        t = object.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t._tracked = tracked
        return t

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
    def tracked(self) -> bool:
        return self._tracked

    @property
    def T(self):
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return len(self.data)

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None):
        if axis is None:
            return tsum(self) * (1.0 / max(self.size, 1))
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Records primitives applied to tracked tensors while active."""

    def __init__(self):
        self._nodes = []
        self._outputs = set()
        self._consumed = False

    def __enter__(self):
        if self._consumed:
            raise ContractError("tape already consumed by backward()")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, out, parents, grad_fn):
        self._nodes.append((out, parents, grad_fn))
        self._outputs.add(id(out))

    def backward(self, loss: Tensor) -> dict:
        return backward(self, loss)


def backward(tape: GradTape, loss: Tensor) -> dict:
    """Reverse-accumulate d(loss)/d(leaf) for every tracked leaf on the tape.

    The tape is consumed: a second call raises :class:`ContractError`.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError(f"loss must be a scalar tensor, got shape {getattr(loss, 'shape', None)}")
    if tape._consumed:
        raise ContractError("tape already consumed by backward()")
    tape._consumed = True
    if not loss._tracked:
        return {}
    if loss.requires_grad:
        return {loss: np.ones_like(loss.data)}
    if id(loss) not in tape._outputs:
        raise ContractError("loss was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    nodes, tape._nodes = tape._nodes, []
    tape._outputs = set()
    for out, parents, grad_fn in reversed(nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, gp in zip(parents, grad_fn(g)):
            if gp is None or not p._tracked:
                continue
            key = id(p)
            if p.requires_grad:
                leaves[key] = p
            prev = grads.get(key)
            grads[key] = gp if prev is None else prev + gp
    return {leaf: grads[key] for key, leaf in leaves.items()}


def _result(value, parents, grad_fn) -> Tensor:
    tape = _current_tape()
    if tape is not None and any(p._tracked for p in parents):
        out = Tensor._wrap(value, tracked=True)
        tape._record(out, parents, grad_fn)
        return out
    return Tensor._wrap(value)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data, b.data
    return _result(da * db, (a, b),
                   lambda g: (_unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data, b.data
    out = da / db
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / db, da.shape), _unbroadcast(-g * out / db, db.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    da = a.data
    return _result(np.log(da), (a,), lambda g: (g / da,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (0.5 * g / out,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    da = a.data
    return _result(np.sin(da), (a,), lambda g: (g * np.cos(da),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    da = a.data
    return _result(np.cos(da), (a,), lambda g: (-g * np.sin(da),))


def gelu(x) -> Tensor:
    """``x * Phi(x)`` with the exact Gaussian CDF."""
    x = as_tensor(x)
    dx = x.data
    return _result(kernels.gelu_forward(dx), (x,), lambda g: (kernels.gelu_backward(dx, g),))


# shape manipulation

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), grad_fn)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("stack of an empty sequence")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _result(out, tuple(tensors),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# reductions

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), grad_fn)


def reduce_mean(x, axis: int) -> Tensor:
    """Arithmetic mean along ``axis``; the axis is removed."""
    x = as_tensor(x)
    n = x.shape[axis]
    if n == 0:
        raise DomainError(f"mean over empty axis {axis}")
    shape = x.shape
    out = x.data.sum(axis=axis) / n
    return _result(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),))


# linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    da, db = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(db, -1, -2)), da.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(da, -1, -2), g), db.shape)
        return ga, gb

    return _result(np.matmul(da, db), (a, b), grad_fn)


def conv1d(x, kernels_, stride: int = 1) -> Tensor:
    """Valid cross-correlation of ``x[c_in, L]`` with ``kernels_[c_out, c_in, k]``."""
    x, w = as_tensor(x), as_tensor(kernels_)
    if x.ndim != 2 or w.ndim != 3 or w.shape[1] != x.shape[0]:
        raise DimensionError(f"conv1d shapes incompatible: input {x.shape}, kernels {w.shape}")
    if stride < 1:
        raise ContractError("stride must be positive")
    k = w.shape[2]
    if x.shape[1] < k:
        raise InputTooShortError(f"input length {x.shape[1]} shorter than kernel {k}")
    dx = np.ascontiguousarray(x.data)
    dw = np.ascontiguousarray(w.data)
    out = kernels.conv1d_forward(dx, dw, stride)
    return _result(out, (x, w),
                   lambda g: kernels.conv1d_backward(dx, dw, np.ascontiguousarray(g), stride))


def conv_out_length(length: int, k: int, stride: int) -> int:
    return (length - k) // stride + 1


# normalisation and probabilities

def softmax(x) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DomainError("softmax over empty axis")
    shape = x.shape
    y = kernels.softmax_forward(np.ascontiguousarray(x.data.reshape(-1, shape[-1])))
    out = y.reshape(shape)
    return _result(out, (x,), lambda g: (
        kernels.softmax_backward(y, np.ascontiguousarray(g.reshape(y.shape))).reshape(shape),))


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm shapes incompatible: {x.shape}, {gain.shape}, {bias.shape}")
    shape = x.shape
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    dg = np.ascontiguousarray(gain.data)
    y, xhat, rstd = kernels.layer_norm_forward(x2, dg, np.ascontiguousarray(bias.data), float(eps))
    if not np.all(np.isfinite(rstd)):
        raise DomainError("layer_norm of a constant row with eps=0")

    def grad_fn(g):
        gx, gg, gb = kernels.layer_norm_backward(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, dg)
        return gx.reshape(shape), gg, gb

    return _result(y.reshape(shape), (x, gain, bias), grad_fn)
