"""
Reverse-mode differentiable arrays backed by numpy buffers.

Every operation below records a node on the active tape together with a
closure mapping the upstream gradient to one gradient per parent. Only the
primitives the models and losses need are provided.
"""

import itertools
import logging
import math
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence, Union

import numpy as np

log = logging.getLogger(__name__)

DTYPE = np.float64
MAX_RANK = 3


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    pass


class DomainError(ValueError):
    """Raised when an operation is evaluated outside of its domain."""

    pass


class ParameterError(ValueError):
    """Raised when an operation receives an invalid hyperparameter."""

    pass


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or a gradient contains NaN or Inf."""

    pass


class Tape:
    """Ordered record of primitive operations.

    Nodes are stamped with a monotonically increasing clock value when they
    are created, so sorting by stamp gives an order consistent with recording.
    """

    def __init__(self):
        self._clock = itertools.count()
        self._local = threading.local()

    @property
    def recording(self) -> bool:
        # per thread, so inference workers can run under no_grad side by side
        return getattr(self._local, "recording", True)

    @recording.setter
    def recording(self, value: bool) -> None:
        self._local.recording = value

    def stamp(self) -> int:
        return next(self._clock)


_tape = Tape()


@contextmanager
def no_grad():
    """Evaluate operations without recording them on the tape."""
    previous = _tape.recording
    _tape.recording = False
    try:
        yield
    finally:
        _tape.recording = previous


def is_recording() -> bool:
    return _tape.recording


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Array:
    """A real-valued array that may take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data: np.ndarray = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._order = _tape.stamp()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Array":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Array":
        return Array(self.data)

    def sum(self, axis=None, keepdims=False) -> "Array":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Array":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Array":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Array(shape={self.shape}{flag})"


def Parameter(data, name: Optional[str] = None) -> Array:  # noqa: N802
    """A leaf array that accumulates gradients."""
    return Array(data, requires_grad=True, name=name)


Operand = Union[Array, np.ndarray, float, int]


def as_array(value: Operand) -> Array:
    if isinstance(value, Array):
        return value
    return Array(value)


def record(data, parents: Sequence[Array], backward: BackwardFn) -> Array:
    """Create the output node of a primitive and put it on the tape."""
    data = np.asarray(data, dtype=DTYPE)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"Non-finite value produced by '{getattr(backward, '__qualname__', 'op')}'")
    out = Array(data)
    if _tape.recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _broadcast_shape(*shapes) -> tuple:
    try:
        shape = np.broadcast_shapes(*shapes)
    except ValueError as e:
        raise ShapeError(f"Shapes {shapes} are not broadcast-compatible") from e
    if len(shape) > MAX_RANK:
        raise ShapeError(f"Broadcasting beyond rank {MAX_RANK} is not supported: {shape}")
    return shape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise arithmetic


def add(a: Operand, b: Operand) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_shape(a.shape, b.shape)

    def add_backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), add_backward)


def sub(a: Operand, b: Operand) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_shape(a.shape, b.shape)

    def sub_backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), sub_backward)


def mul(a: Operand, b: Operand) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_shape(a.shape, b.shape)

    def mul_backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(a.data * b.data, (a, b), mul_backward)


def neg(a: Operand) -> Array:
    a = as_array(a)
    return record(-a.data, (a,), lambda g: (-g,))


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    # tanh form stays finite for any magnitude
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Operand) -> Array:
    x = as_array(x)
    s = sigmoid_values(x.data)

    def sigmoid_backward(g):
        return (g * s * (1.0 - s),)

    return record(s, (x,), sigmoid_backward)


def log_sigmoid(x: Operand) -> Array:
    x = as_array(x)

    def log_sigmoid_backward(g):
        return (g * sigmoid_values(-x.data),)

    return record(-np.logaddexp(0.0, -x.data), (x,), log_sigmoid_backward)


def tanh(x: Operand) -> Array:
    x = as_array(x)
    t = np.tanh(x.data)

    def tanh_backward(g):
        return (g * (1.0 - t * t),)

    return record(t, (x,), tanh_backward)


def relu(x: Operand) -> Array:
    x = as_array(x)
    gate = (x.data > 0).astype(DTYPE)

    def relu_backward(g):
        return (g * gate,)

    return record(x.data * gate, (x,), relu_backward)


def exp(x: Operand) -> Array:
    x = as_array(x)
    e = np.exp(x.data)

    def exp_backward(g):
        return (g * e,)

    return record(e, (x,), exp_backward)


def log(x: Operand) -> Array:
    x = as_array(x)
    if np.any(x.data <= 0):
        raise DomainError("log is only defined for positive values")

    def log_backward(g):
        return (g / x.data,)

    return record(np.log(x.data), (x,), log_backward)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
}


def elementwise(op_name: str, *inputs: Operand) -> Array:
    """Apply a registered elementwise primitive by name."""
    try:
        op = _ELEMENTWISE[op_name]
    except KeyError:
        raise LookupError(f"Unknown elementwise operation '{op_name}'. Available: {', '.join(sorted(_ELEMENTWISE))}")
    return op(*inputs)


# Shape manipulation


def matmul(a: Operand, b: Operand) -> Array:
    """Matrix product of a rank-2 or rank-3 array with a rank-2 array."""
    a, b = as_array(a), as_array(b)
    if a.ndim not in (2, 3) or b.ndim != 2:
        raise ShapeError(f"matmul expects (n, k) or (b, n, k) times (k, m), got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"Inner dimensions differ: {a.shape} x {b.shape}")

    def matmul_backward(g):
        grad_a = g @ b.data.T
        grad_b = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return grad_a, grad_b

    return record(a.data @ b.data, (a, b), matmul_backward)


def transpose(a: Operand) -> Array:
    a = as_array(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a rank-2 array, got {a.shape}")
    return record(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Operand, shape: tuple) -> Array:
    a = as_array(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"Cannot reshape {a.shape} into {shape}") from e
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Operand, index) -> Array:
    """Basic or advanced indexing; gradients scatter back with accumulation."""
    a = as_array(a)
    if isinstance(index, list):
        index = np.asarray(index)

    def getitem_backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record(a.data[index], (a,), getitem_backward)


def concat(arrays: Sequence[Operand], axis: int = 0) -> Array:
    arrays = [as_array(x) for x in arrays]
    if not arrays:
        raise ShapeError("concat needs at least one array")
    try:
        out = np.concatenate([x.data for x in arrays], axis=axis)
    except ValueError as e:
        raise ShapeError(f"Cannot concatenate shapes {[x.shape for x in arrays]} along axis {axis}") from e
    sizes = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def concat_backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record(out, tuple(arrays), concat_backward)


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.array(np.broadcast_to(g, shape))


def sum_(a: Operand, axis=None, keepdims: bool = False) -> Array:
    a = as_array(a)

    def sum_backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return record(a.data.sum(axis=axis, keepdims=keepdims), (a,), sum_backward)


def mean(a: Operand, axis=None, keepdims: bool = False) -> Array:
    a = as_array(a)
    count = a.data.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# Normalisation


def _logsumexp_values(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))


def softmax(x: Operand, axis: int = -1) -> Array:
    x = as_array(x)
    s = np.exp(x.data - _logsumexp_values(x.data, axis))

    def softmax_backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return record(s, (x,), softmax_backward)


def log_softmax(x: Operand, axis: int = -1) -> Array:
    x = as_array(x)
    out = x.data - _logsumexp_values(x.data, axis)

    def log_softmax_backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return record(out, (x,), log_softmax_backward)


def logsumexp(x: Operand, axis: int = -1) -> Array:
    x = as_array(x)
    lse = _logsumexp_values(x.data, axis)
    s = np.exp(x.data - lse)

    def logsumexp_backward(g):
        return (np.expand_dims(g, axis) * s,)

    return record(np.squeeze(lse, axis=axis), (x,), logsumexp_backward)


def masked_softmax(x: Operand, mask: np.ndarray) -> Array:
    """Softmax over the last axis restricted to positions where mask is true.

    Rows with no open position produce all zeros.
    """
    x = as_array(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    shifted = np.where(mask, x.data, -np.inf)
    m = np.max(shifted, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(np.where(mask, x.data - m, -np.inf))
    denom = np.sum(e, axis=-1, keepdims=True)
    s = e / np.where(denom > 0, denom, 1.0)

    def masked_softmax_backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return record(s, (x,), masked_softmax_backward)


def layer_norm(x: Operand, gain: Operand, bias: Operand, eps: float = 1e-5) -> Array:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    x, gain, bias = as_array(x), as_array(gain), as_array(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std

    def layer_norm_backward(g):
        gxhat = g * gain.data
        grad_x = inv_std * (
            gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grad_gain = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        grad_bias = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return grad_x, grad_gain, grad_bias

    return record(xhat * gain.data + bias.data, (x, gain, bias), layer_norm_backward)


# Composite operations


def attention(q: Operand, k: Operand, v: Operand, mask: np.ndarray) -> Array:
    """Scaled dot-product attention of queries (n, d) over keys/values (m, d).

    ``mask[i, j]`` is true when query i may attend to key j. A fully masked
    query row yields a zero vector.
    """
    q, k, v = as_array(q), as_array(k), as_array(v)
    if q.shape[-1] != k.shape[-1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"Incompatible attention operands q={q.shape} k={k.shape} v={v.shape}")
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = masked_softmax(scores, mask)
    return matmul(weights, v)


def dropout(x: Operand, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Array:
    """Inverted dropout: survivors are scaled by 1 / (1 - rate)."""
    x = as_array(x)
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"Dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("Dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(DTYPE) / (1.0 - rate)

    def dropout_backward(g):
        return (g * keep,)

    return record(x.data * keep, (x,), dropout_backward)


def backward(loss: Array) -> list:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the list of leaves that received a gradient. Each recorded node is
    visited exactly once, in reverse recording order.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return []

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in nodes:
            continue
        nodes[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = []
    for node in sorted(nodes.values(), key=lambda n: n._order, reverse=True):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            leaves.append(node)
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
    return leaves
