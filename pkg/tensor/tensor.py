"""Dense tensors with define-by-run reverse-mode autodiff on top of numpy.

A ``Tensor`` wraps an ndarray. Every differentiable operation records its
parents and a gradient function; ``backward`` walks the recorded graph in
reverse topological order. Graphs are per-thread: gradient recording is a
thread-local switch and tensors are never shared across jobs.
"""

import hashlib
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import ConfigError, DimensionError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_state = threading.local()

GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def set_precision(name: str) -> None:
    """Select the dtype new tensors are created with ("float32" or "float64")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ConfigError(f"unsupported precision: {name!r}; use float32 or float64")
    _default_dtype = _DTYPES[name]


def get_dtype():
    return _default_dtype


@contextmanager
def precision(name: str):
    """Temporarily switch the default precision."""
    global _default_dtype
    previous = _default_dtype
    set_precision(name)
    try:
        yield
    finally:
        _default_dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run operations without recording a graph (inference only)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An n-dimensional array with optional gradient tracking."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=dtype if dtype is not None else _default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._grad_fn: Optional[GradFn] = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], grad_fn: GradFn) -> "Tensor":
        """Wrap an operation result, recording the graph edge when needed."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        tracked = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._grad_fn = grad_fn if tracked else None
        return out

    # --- convenience ---
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
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{req}{nm})"

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def clone(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # --- autograd core ---
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate gradients of this tensor into every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("grad must be provided for non-scalar outputs")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(_topological_order(self)):
            if node._grad_fn is None or node.grad is None:
                continue
            parent_grads = node._grad_fn(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is not None and parent.requires_grad:
                    parent._accumulate(g)
            # Interior nodes are not revisited; drop the edges so memory can go
            node._grad_fn = None
            node._parents = ()

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            g = unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # --- elementwise arithmetic ---
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype), dtype=self.data.dtype)

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        a_shape, b_shape = self.shape, other.shape

        def grad_fn(g):
            return unbroadcast(g, a_shape), unbroadcast(g, b_shape)

        return Tensor.from_op(self.data + other.data, (self, other), grad_fn)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        a_shape, b_shape = self.shape, other.shape

        def grad_fn(g):
            return unbroadcast(g, a_shape), unbroadcast(-g, b_shape)

        return Tensor.from_op(self.data - other.data, (self, other), grad_fn)

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self.data, other.data

        def grad_fn(g):
            return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)

        return Tensor.from_op(a * b, (self, other), grad_fn)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self.data, other.data

        def grad_fn(g):
            return unbroadcast(g / b, a.shape), unbroadcast(-g * a / (b * b), b.shape)

        return Tensor.from_op(a / b, (self, other), grad_fn)

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        p = exponent

        def grad_fn(g):
            return (g * p * a ** (p - 1),)

        return Tensor.from_op(a ** p, (self,), grad_fn)

    # --- linear algebra ---
    def __matmul__(self, other) -> "Tensor":
        return matmul(self, self._coerce(other))

    # --- reductions ---
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor.from_op(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), grad_fn)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # --- shape manipulation ---
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor.from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor.from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def broadcast_to(self, shape: Tuple[int, ...]) -> "Tensor":
        original = self.shape
        return Tensor.from_op(np.broadcast_to(self.data, shape), (self,), lambda g: (unbroadcast(g, original),))

    def __getitem__(self, index) -> "Tensor":
        if isinstance(index, Tensor):
            index = index.data
        shape = self.shape
        dtype = self.data.dtype

        def grad_fn(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor.from_op(np.array(self.data[index]), (self,), grad_fn)

    # --- elementwise functions ---
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor.from_op(np.log(a), (self,), lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * (1.0 - out * out),))

    def clip(self, low: float, high: float) -> "Tensor":
        a = self.data
        inside = (a >= low) & (a <= high)
        return Tensor.from_op(np.clip(a, low, high), (self,), lambda g: (g * inside,))

    def norm(self, axis: int = -1, keepdims: bool = False) -> "Tensor":
        """Euclidean norm along ``axis``; the gradient at the origin is zero."""
        a = self.data
        out = np.sqrt((a * a).sum(axis=axis, keepdims=True))

        def grad_fn(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            safe = np.where(out > 0, out, 1.0)
            return (np.where(out > 0, g * a / safe, 0.0).astype(a.dtype),)

        result = out if keepdims else np.squeeze(out, axis=axis)
        return Tensor.from_op(np.asarray(result), (self,), grad_fn)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    """Create a tensor in the current default precision."""
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching over leading dimensions."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def grad_fn(g):
        ga = unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
        gb = unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return ga, gb

    return Tensor.from_op(x @ y, (a, b), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def where(condition: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select elementwise from ``a`` where ``condition`` holds, else ``b``."""
    cond = np.asarray(condition, dtype=bool)
    a_shape, b_shape = a.shape, b.shape

    def grad_fn(g):
        return unbroadcast(np.where(cond, g, 0.0), a_shape), unbroadcast(np.where(cond, 0.0, g), b_shape)

    return Tensor.from_op(np.where(cond, a.data, b.data), (a, b), grad_fn)


def _topological_order(root: Tensor) -> List[Tensor]:
    """Iterative DFS so deep graphs do not hit the recursion limit."""
    order: List[Tensor] = []
    visited = set()
    stack_: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack_.append((parent, False))
    return order


def parameters_digest(params: Iterable[Tensor]) -> str:
    """SHA-256 over parameter bytes; equal digests mean untouched weights."""
    h = hashlib.sha256()
    for p in params:
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


TensorLike = Union[Tensor, np.ndarray, float]
