#!/usr/bin/env python3
"""
Reverse-Mode Autodiff
A numpy-backed Tensor that records the operation that produced it and a closure
pushing gradients back to its parents. Single precision by default; gradient
checks switch to double precision with `precision(np.float64)`.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from allsmiles.errors import NonScalarRoot, ShapeMismatch

LOG_FLOOR = 1e-12

_local = threading.local()


def default_dtype():
    return getattr(_local, 'dtype', np.float32)


def grad_enabled() -> bool:
    return getattr(_local, 'enabled', True)


@contextmanager
def no_grad():
    previous = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = previous


@contextmanager
def precision(dtype):
    previous = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Value node: payload, gradient slot and the recipe for its parents' gradients"""

    __slots__ = ('data', 'grad', 'requires_grad', 'op', '_prev', '_backward')

    def __init__(self, data, requires_grad: bool = False, op: str = ''):
        if not isinstance(data, np.ndarray) or data.dtype.kind != 'f':
            data = np.asarray(data, dtype=default_dtype())
        self.data: np.ndarray = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._prev: Tuple['Tensor', ...] = ()
        self._backward: Optional[Backward] = None

    def __repr__(self) -> str:
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f'Tensor(shape={self.shape}, op={self.op or "leaf"}{flag})'

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> 'Tensor':
        return self.transpose()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # operators
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, exponent: float): return power(self, exponent)
    def __getitem__(self, index): return index_select(self, index)

    # methods
    def sum(self, axis=None, keepdims: bool = False): return reduce_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return reduce_mean(self, axis, keepdims)
    def max(self, axis=None, keepdims: bool = False): return reduce_max(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def sqrt(self): return sqrt(self)
    def square(self): return square(self)
    def sigmoid(self): return sigmoid(self)
    def tanh(self): return tanh(self)
    def relu(self): return relu(self)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=default_dtype()))


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=True)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=requires_grad)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Backward, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


# Elementwise binary ops

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check('add', a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), 'add')


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check('sub', a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), 'sub')


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check('mul', a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), 'mul')


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check('div', a, b)
    out = a.data / b.data
    return _node(out, (a, b), lambda g: (g / b.data, -g * out / b.data), 'div')


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), 'neg')


def power(a: Tensor, exponent: float) -> Tensor:
    return _node(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),), 'pow')


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), 'square')


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), 'sqrt')


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """(..., k) @ (k, m) -> (..., m)"""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch('matmul', a.shape, b.shape)
    k, m = b.shape

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, 'matmul')


# Elementwise unary ops

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), 'exp')


def log(a: Tensor) -> Tensor:
    clamped = np.maximum(a.data, LOG_FLOOR)
    return _node(np.log(clamped), (a,),
                 lambda g: (g / clamped * (a.data > LOG_FLOOR),), 'log')


def sigmoid(a: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(0.0, -a.data)).astype(a.data.dtype)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), 'sigmoid')


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), 'tanh')


def relu(a: Tensor) -> Tensor:
    return _node(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),), 'relu')


def sin(a: Tensor) -> Tensor:
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), 'sin')


def cos(a: Tensor) -> Tensor:
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), 'cos')


def hard_tanh(a: Tensor, lower, upper) -> Tensor:
    """Clamp to [lower, upper]; subgradient 1 inside, boundary included"""
    lower = np.asarray(lower, dtype=a.data.dtype)
    upper = np.asarray(upper, dtype=a.data.dtype)
    inside = (a.data >= lower) & (a.data <= upper)
    return _node(np.clip(a.data, lower, upper), (a,), lambda g: (g * inside,), 'hard_tanh')


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _node(out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), 'softmax')


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - logsum
    probs = np.exp(out)
    return _node(out, (a,),
                 lambda g: (g - probs * g.sum(axis=axis, keepdims=True),), 'log_softmax')


# Reductions

def _expand(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, a.shape, axis, keepdims),), 'sum')


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(out.size, 1)
    return _node(out, (a,), lambda g: (_expand(g, a.shape, axis, keepdims) / count,), 'mean')


def reduce_max(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Max with the gradient routed to the first argmax"""
    if axis is None:
        flat = int(np.argmax(a.data))

        def backward_all(g):
            grad = np.zeros_like(a.data)
            grad.reshape(-1)[flat] = np.asarray(g).reshape(-1)[0]
            return (grad,)

        out = a.data.reshape(-1)[flat]
        return _node(np.asarray(out).reshape((1,) * a.ndim if keepdims else ()), (a,),
                     backward_all, 'max')

    index = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, index, axis=axis)

    def backward(g):
        grad = np.zeros_like(a.data)
        g = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(grad, index, g, axis=axis)
        return (grad,)

    return _node(out if keepdims else np.squeeze(out, axis=axis), (a,), backward, 'max')


# Shape ops

def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), 'reshape')


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), 'transpose')


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch('concat', *[t.shape for t in tensors]) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)), 'concat')


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch('stack', *[t.shape for t in tensors]) from None
    return _node(out, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))), 'stack')


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is Ellipsis or p is None or isinstance(p, (int, slice)) for p in parts)


def index_select(a: Tensor, index) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate on the way back"""
    basic = _is_basic(index)

    def backward(g):
        grad = np.zeros_like(a.data)
        if basic:
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _node(a.data[index], (a,), backward, 'index')


def take(a: Tensor, indices) -> Tensor:
    """Rows of `a` picked by an integer array of any shape"""
    indices = np.asarray(indices, dtype=np.int64)
    if a.ndim < 1 or (indices.size and (indices.min() < 0 or indices.max() >= a.shape[0])):
        raise ShapeMismatch('take', a.shape, indices.shape)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, indices.reshape(-1), g.reshape((-1,) + a.shape[1:]))
        return (grad,)

    return _node(a.data[indices], (a,), backward, 'take')


# Backward pass

def _topological(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor, wrt: Optional[Sequence[Tensor]] = None) -> Optional[List[np.ndarray]]:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf's .grad

    With `wrt` given, also returns those tensors' gradients (zeros when the
    root does not depend on them).
    """
    if root.size != 1:
        raise NonScalarRoot(root.shape)
    order = _topological(root)
    pending = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._prev, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg), parent.shape)
            held = pending.get(id(parent))
            pending[id(parent)] = pg if held is None else held + pg

    if wrt is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


# Finite-difference checking

@dataclass
class GradCheckReport:
    name: str = ''
    passed: bool = True
    max_rel_error: float = 0.0
    probes: int = 0
    excluded: int = 0
    failures: List[Tuple[int, int, float, float]] = field(default_factory=list)

    def summary(self) -> str:
        status = 'ok' if self.passed else 'FAILED'
        return (f'{self.name or "check"}: {status} max_rel_error={self.max_rel_error:.2e} '
                f'probes={self.probes} excluded={self.excluded}')


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _near_kink(value: float, kinks, flat: int, shape, guard: float) -> bool:
    for k in kinks:
        k = np.broadcast_to(np.asarray(k, dtype=np.float64), shape).reshape(-1)[flat]
        if abs(value - k) < guard:
            return True
    return False


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], tolerance: float,
               step: float = 1e-5, kinks: Optional[Sequence[Iterable]] = None,
               kink_guard: float = 2e-5, max_probes: Optional[int] = None,
               rng: Optional[np.random.Generator] = None, name: str = '',
               atol: float = 0.0) -> GradCheckReport:
    """Compare backward() against central differences of f over the input elements

    `kinks[i]` lists values (broadcastable to inputs[i]) where f is not
    differentiable; elements within `kink_guard` of one are skipped.
    `max_probes` caps the number of probed elements per input (random subset).
    `atol` accepts probes whose absolute difference is below it (0 = relative only).
    Inputs are promoted to double precision in place.
    """
    report = GradCheckReport(name=name)
    with precision(np.float64):
        for t in inputs:
            t.data = t.data.astype(np.float64)
            t.grad = None
        backward(f(), wrt=inputs)
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

        with no_grad():
            for i, t in enumerate(inputs):
                flat_data = t.data.reshape(-1)
                candidates = np.arange(flat_data.size)
                if max_probes is not None and flat_data.size > max_probes:
                    rng = rng or np.random.default_rng(0)
                    candidates = np.sort(rng.choice(flat_data.size, size=max_probes, replace=False))
                for flat in candidates:
                    original = float(flat_data[flat])
                    if kinks and kinks[i] and _near_kink(original, kinks[i], flat, t.shape, kink_guard):
                        report.excluded += 1
                        continue
                    flat_data[flat] = original + step
                    plus = float(f().data.sum())
                    flat_data[flat] = original - step
                    minus = float(f().data.sum())
                    flat_data[flat] = original
                    numeric = (plus - minus) / (2 * step)
                    a = float(analytic[i].reshape(-1)[flat])
                    error = relative_error(a, numeric)
                    report.probes += 1
                    report.max_rel_error = max(report.max_rel_error, error)
                    if error >= tolerance and abs(a - numeric) > atol:
                        report.failures.append((i, int(flat), a, numeric))
    report.passed = not report.failures
    return report
