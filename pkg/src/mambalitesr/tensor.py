"""Dense N-d arrays with tape-based reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major numpy buffer. Every differentiable
operation that touches a tensor with ``requires_grad=True`` produces a result
that remembers its parents and a backward rule. :func:`backward` walks those
records in reverse topological order. An explicit :class:`Tape` may be opened
to capture the recorded operations in creation order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericalError, UsageError

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
DEFAULT_DTYPE = DTYPES["f32"]

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_enabled = True
_tape_stack: list["Tape"] = []


def resolve_dtype(dtype) -> np.dtype:
    if dtype is None:
        return DEFAULT_DTYPE
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    dt = np.dtype(dtype)
    if dt not in DTYPES.values():
        raise UsageError(f"unsupported dtype {dt}; expected f32 or f64")
    return dt


def dtype_name(dtype) -> str:
    dt = np.dtype(dtype)
    for name, value in DTYPES.items():
        if value == dt:
            return name
    raise UsageError(f"unsupported dtype {dt}")


class Tensor:
    """N-dimensional float array that can take part in gradient recording."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype not in DTYPES.values():
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def validate(self) -> "Tensor":
        """Raise :class:`NumericalError` if any element is NaN or infinite."""
        if not np.all(np.isfinite(self.data)):
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            label = self.name or "tensor"
            raise NumericalError(f"{label} of shape {self.shape} has {bad} non-finite elements")
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={dtype_name(self.dtype)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators (implemented in ops) --------------------------------
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
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
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
        return ops.transpose(self, axes or None)

    def exp(self):
        from . import ops
        return ops.exp(self)

    def abs(self):
        from . import ops
        return ops.abs(self)


def parameter(data, dtype=None, name: Optional[str] = None) -> Tensor:
    """Create a trainable leaf tensor."""
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


class Tape:
    """Records differentiable operations in creation order.

    Use as a context manager; operations executed inside the block append
    their output tensors to :attr:`nodes`, which is therefore topologically
    ordered by construction.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable gradient recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        for tape in _tape_stack:
            tape.record(out)
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, tape: Optional[Tape] = None, accumulate: bool = False) -> None:
    """Fill ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    By default leaf gradients are reset before being filled. Passing
    ``accumulate=True`` adds into existing ``.grad`` buffers instead.
    If ``tape`` is given, every intermediate node must have been recorded on it.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor with requires_grad=True")

    order = _topological_order(loss)
    if tape is not None:
        recorded = {id(n) for n in tape.nodes}
        missing = [n for n in order if not n.is_leaf and id(n) not in recorded]
        if missing:
            raise UsageError(f"{len(missing)} operations feeding the loss were not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: list[Tensor] = []
    for node in reversed(order):
        if node.is_leaf:
            leaves.append(node)
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            target = leaf_grads if parent.is_leaf else grads
            key = id(parent)
            if key in target:
                target[key] = target[key] + pg
            else:
                target[key] = pg

    for leaf in leaves:
        g = leaf_grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        else:
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        if accumulate and leaf.grad is not None:
            leaf.grad = leaf.grad + g
        else:
            leaf.grad = np.array(g, copy=True)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` under trailing-axis broadcasting rules."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def broadcast_shape(*shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(*shapes))
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {' and '.join(map(str, shapes))}") from None
