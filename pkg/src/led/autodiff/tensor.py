"""Tape-based reverse-mode automatic differentiation over float64 arrays.

A :class:`Tensor` wraps a numpy ``float64`` array. Operations applied while a
:class:`Tape` is active, and with at least one operand that requires a
gradient, append a node holding the vector-Jacobian product closure. Calling
:func:`backward` walks the nodes in reverse recording order, which is a valid
reverse topological order because inputs are always recorded before outputs.

Broadcasting follows numpy's trailing-dimension rule; adjoints of broadcast
operands are summed back to the operand's shape.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np
from scipy import special

from ..errors import ContractError, DimensionError, DomainError

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "backward",
    "as_tensor",
    "matmul",
    "elementwise",
    "reduce",
    "concat",
    "clip",
    "no_tape",
]

_ids = itertools.count()
_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; tapes nest, and only the innermost one records.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()
        return False

    def record(self, kind, out, inputs, vjp):
        self.nodes.append((kind, out, inputs, vjp))

    def __len__(self):
        return len(self.nodes)


class no_tape:
    """Suspend recording inside the block (evaluation-only code paths)."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()
        return self

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)
        return False


class Tensor:
    """Dense float64 array that can take part in a gradient tape."""

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "name", "id")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.id = next(_ids)

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __neg__(self):
        return elementwise("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _getitem(self, index)

    # -- method forms --------------------------------------------------
    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def tanh(self):
        return elementwise("tanh", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def relu(self):
        return elementwise("relu", self)

    def elu(self):
        return elementwise("elu", self)

    def softplus(self):
        return elementwise("softplus", self)

    def square(self):
        return elementwise("square", self)

    def sum(self, axis=None):
        return reduce("sum", self, axis)

    def mean(self, axis=None):
        return reduce("mean", self, axis)

    def logsumexp(self, axis=None):
        return reduce("logsumexp", self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    @property
    def T(self):
        return _transpose(self)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(kind, value, inputs, vjp):
    """Wrap ``value`` and record a node when any input needs a gradient."""
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.record(kind, out, inputs, vjp)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


_BINARY = ("add", "sub", "mul", "div")
_UNARY = (
    "exp", "log", "tanh", "sigmoid", "relu", "elu", "neg", "softplus", "square",
    "ndtr", "ndtri",
)


def elementwise(op, a, b=None):
    """Apply elementwise ``op`` to ``a`` (and ``b`` for binary ops)."""
    a = as_tensor(a)
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        b = as_tensor(b)
        _broadcast_shape(a, b)
        return _binary(op, a, b)
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"{op} takes one operand")
        return _unary(op, a)
    raise ContractError(f"unknown elementwise op {op!r}")


def _binary(op, a, b):
    x, y = a.data, b.data
    if op == "add":
        value = x + y

        def vjp(g):
            return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    elif op == "sub":
        value = x - y

        def vjp(g):
            return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)

    elif op == "mul":
        value = x * y

        def vjp(g):
            return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    else:
        if np.any(y == 0):
            raise DomainError("division by zero")
        value = x / y

        def vjp(g):
            gx = g / y
            return _unbroadcast(gx, x.shape), _unbroadcast(-gx * value, y.shape)

    return _make(op, value, (a, b), vjp)


def _unary(op, a):
    x = a.data
    if op == "exp":
        value = np.exp(x)

        def vjp(g):
            return (g * value,)

    elif op == "log":
        if np.any(x <= 0):
            raise DomainError("log of non-positive value")
        value = np.log(x)

        def vjp(g):
            return (g / x,)

    elif op == "tanh":
        value = np.tanh(x)

        def vjp(g):
            return (g * (1.0 - value * value),)

    elif op == "sigmoid":
        value = special.expit(x)

        def vjp(g):
            return (g * value * (1.0 - value),)

    elif op == "relu":
        value = np.maximum(x, 0.0)

        def vjp(g):
            return (g * (x > 0),)

    elif op == "elu":
        neg = np.expm1(np.minimum(x, 0.0))
        value = np.where(x > 0, x, neg)

        def vjp(g):
            return (g * np.where(x > 0, 1.0, neg + 1.0),)

    elif op == "neg":
        value = -x

        def vjp(g):
            return (-g,)

    elif op == "softplus":
        value = np.logaddexp(0.0, x)

        def vjp(g):
            return (g * special.expit(x),)

    elif op == "square":
        value = x * x

        def vjp(g):
            return (2.0 * g * x,)

    elif op == "ndtr":
        value = special.ndtr(x)

        def vjp(g):
            return (g * np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi),)

    else:  # ndtri
        if np.any((x <= 0) | (x >= 1)):
            raise DomainError("inverse normal CDF needs values in (0, 1)")
        value = special.ndtri(x)

        def vjp(g):
            return (g * np.sqrt(2 * np.pi) * np.exp(0.5 * value * value),)

    return _make(op, value, (a,), vjp)


def clip(a, low, high):
    """Clamp values; the gradient is zero where clamping is active."""
    a = as_tensor(a)
    x = a.data
    value = np.clip(x, low, high)
    inside = (x >= low) & (x <= high)

    def vjp(g):
        return (g * inside,)

    return _make("clip", value, (a,), vjp)


def matmul(a, b):
    """Matrix product of ``a`` [m, k] and ``b`` [k, n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def vjp(g):
        return g @ y.T, x.T @ g

    return _make("matmul", x @ y, (a, b), vjp)


def reduce(op, a, axis=None):
    """Reduce with ``sum``, ``mean`` or a max-shifted ``logsumexp``."""
    a = as_tensor(a)
    x = a.data
    if axis is not None:
        if not -x.ndim <= axis < x.ndim:
            raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
        axis = axis % x.ndim

    def expand(g):
        return g if axis is None else np.expand_dims(g, axis)

    if op == "sum":
        value = x.sum(axis=axis)

        def vjp(g):
            return (np.broadcast_to(expand(g), x.shape).copy(),)

    elif op == "mean":
        value = x.mean(axis=axis)
        count = x.size if axis is None else x.shape[axis]

        def vjp(g):
            return (np.broadcast_to(expand(g) / count, x.shape).copy(),)

    elif op == "logsumexp":
        m = x.max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        shifted = np.exp(x - m)
        total = shifted.sum(axis=axis, keepdims=True)
        value = np.log(total) + m
        weights = shifted / total
        value = value.reshape(()) if axis is None else np.squeeze(value, axis=axis)

        def vjp(g):
            return (expand(g) * weights,)

    else:
        raise ContractError(f"unknown reduction {op!r}")
    return _make(op, value, (a,), vjp)


def _reshape(a, shape):
    x = a.data
    try:
        value = x.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None

    def vjp(g):
        return (g.reshape(x.shape),)

    return _make("reshape", value, (a,), vjp)


def _transpose(a):
    def vjp(g):
        return (g.T,)

    return _make("transpose", a.data.T, (a,), vjp)


def _getitem(a, index):
    x = a.data
    value = np.asarray(x[index])

    def vjp(g):
        full = np.zeros_like(x)
        np.add.at(full, index, g)
        return (full,)

    return _make("getitem", value, (a,), vjp)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    arrays = [t.data for t in tensors]
    value = np.concatenate(arrays, axis=axis)
    cuts = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make("concat", value, tuple(tensors), vjp)


class Gradients:
    """Mapping from tensors to their gradient arrays after :func:`backward`.

    Tensors with no path to the loss map to exact zeros.
    """

    def __init__(self, grads):
        self._grads = grads

    def __getitem__(self, tensor):
        g = self._grads.get(tensor.id)
        return np.zeros_like(tensor.data) if g is None else g

    def __contains__(self, tensor):
        return tensor.id in self._grads

    def for_params(self, params):
        """Gradient arrays for a name->tensor mapping, in the same order."""
        return {name: self[t] for name, t in params.items()}


def backward(loss, tape):
    """Accumulate d(loss)/d(tensor) for every tensor recorded on ``tape``."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss tensor, got shape {shape}")
    grads = {loss.id: np.ones_like(loss.data)}
    for _kind, out, inputs, vjp in reversed(tape.nodes):
        g = grads.pop(out.id, None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if not inp.requires_grad:
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
    return Gradients(grads)
