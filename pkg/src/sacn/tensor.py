"""Dense tensors with a small reverse-mode differentiation tape.

Every layer in the network is written against the operations defined here
(plus a handful of fused ops that register themselves through
:meth:`Tensor.from_op`).  Values are plain numpy arrays; the tape is the
graph of ``Tensor`` objects linked through their parents.

Broadcasting is deliberately limited to scalar-against-tensor so that every
gradient rule stays easy to audit.
"""
from __future__ import annotations

import contextlib
import hashlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 4

_state = threading.local()


def _flags():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.grad_enabled = True
    return _state


def get_default_dtype():
    return _flags().dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _flags().dtype = dtype.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``"float32"`` or ``"float64"``)."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _flags().dtype = old


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape."""
    flags = _flags()
    old = flags.grad_enabled
    flags.grad_enabled = False
    try:
        yield
    finally:
        flags.grad_enabled = old


def grad_enabled() -> bool:
    return _flags().grad_enabled


class Tensor:
    """A node in the computation graph.

    ``data`` is the forward value, ``grad`` the accumulated derivative of the
    last backward root with respect to this node (``None`` until a backward
    pass reaches it).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "biuf" and arr.dtype.type not in (np.float32, np.float64):
            arr = arr.astype(get_default_dtype())
        elif arr.dtype.kind not in "f":
            raise TypeError(f"tensor data must be real, got {arr.dtype}")
        if arr.ndim > MAX_RANK:
            raise ValueError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @classmethod
    def from_op(cls, value: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> "Tensor":
        """Build the result of an op.

        ``backward`` maps the output gradient to one gradient (or ``None``) per
        parent.  Nothing is recorded when no parent needs a gradient or when
        the tape is disabled.
        """
        out = cls(value, dtype=value.dtype)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    # differentiation ----------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or get_default_dtype()))


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Propagate d(root)/d(node) into ``node.grad`` for every reachable node.

    Gradients add onto whatever ``grad`` already holds, so calling this twice
    without :func:`zero_grad` accumulates.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not depend on any tensor that requires a gradient")
    seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=root.dtype)
    pending: dict[int, np.ndarray] = {id(root): seed}
    for node in reversed(_topo_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(
                    f"gradient rule produced shape {pg.shape} for a parent of shape {parent.shape}")
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# binary ops


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1 and t.ndim <= 1


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} "
                         "(only scalar-against-tensor broadcasting is supported)")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # constants take the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, _as_tensor(b, a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return _as_tensor(a, b.dtype), b
    return _as_tensor(a), _as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_binary(a, b, "add")
    value = a.data + b.data

    def back(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return Tensor.from_op(value, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_binary(a, b, "mul")
    value = a.data * b.data

    def back(g):
        ga = _reduce_to(g * b.data, a) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(value, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant (no gradient for the constant)."""
    c = a.dtype.type(c)

    def back(g):
        return (g * c,)

    return Tensor.from_op(a.data * c, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must match exactly; no broadcasting.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    value = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(value, (a, b), back)


# ---------------------------------------------------------------------------
# unary / elementwise


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    value = np.maximum(a.data, a.dtype.type(0))  # propagates NaN, unlike a mask

    def back(g):
        return (g * mask,)

    return Tensor.from_op(value, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    value = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)

    def back(g):
        return (g * value * (1 - value),)

    return Tensor.from_op(value, (a,), back)


def square(a: Tensor) -> Tensor:
    def back(g):
        return (2 * g * a.data,)

    return Tensor.from_op(a.data * a.data, (a,), back)


def sqrt(a: Tensor) -> Tensor:
    value = np.sqrt(a.data)

    def back(g):
        # zero subgradient at the origin instead of inf
        safe = np.where(value > 0, value, 1)
        return (np.where(value > 0, g * 0.5 / safe, 0).astype(a.dtype),)

    return Tensor.from_op(value, (a,), back)


def exp(a: Tensor) -> Tensor:
    value = np.exp(a.data)

    def back(g):
        return (g * value,)

    return Tensor.from_op(value, (a,), back)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    value = np.asarray(np.sum(a.data, axis=axis, keepdims=keepdims), dtype=a.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return Tensor.from_op(value, (a,), back)


def mean(a: Tensor) -> Tensor:
    return scale(sum_(a), 1.0 / a.size)


def l2norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis`` (the axis is dropped).

    The norm of an all-zero slice is 0 and its gradient is defined as 0.
    """
    sq = np.sum(a.data * a.data, axis=axis)
    value = np.sqrt(sq).astype(a.dtype)

    def back(g):
        n = np.expand_dims(value, axis)
        safe = np.where(n > 0, n, 1)
        ratio = np.where(n > 0, a.data / safe, 0)
        return ((np.expand_dims(g, axis) * ratio).astype(a.dtype),)

    return Tensor.from_op(value, (a,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {a.ndim}")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        dot = np.sum(g * value, axis=axis, keepdims=True)
        return (value * (g - dot),)

    return Tensor.from_op(value, (a,), back)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    value = a.data.reshape(shape)

    def back(g):
        return (g.reshape(a.shape),)

    return Tensor.from_op(value, (a,), back)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inverse),)

    return Tensor.from_op(np.transpose(a.data, axes), (a,), back)


# ---------------------------------------------------------------------------
# random numbers


class Rng:
    """Seeded generator backed by the Philox4x64 counter-based bit generator.

    Philox output depends only on (key, counter), so a seed yields the same
    stream on every platform.  Streams for independent subsystems come from
    :func:`derive_seed`.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, std: float, shape, dtype=None) -> np.ndarray:
        out = self._gen.standard_normal(size=shape, dtype=np.float64) * std
        return out.astype(dtype or get_default_dtype())

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def child(self, name: str) -> "Rng":
        return Rng(derive_seed(self.seed, name))


def derive_seed(root: int, name: str) -> int:
    """Seed for subsystem ``name``: first 8 bytes (big-endian) of SHA-256("<root>/<name>")."""
    digest = hashlib.sha256(f"{int(root)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")
