"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation records its parents and a closure that maps
the output gradient to parent gradients.  :func:`backward` sorts the
recorded nodes topologically and replays the closures in reverse, so each
node is visited exactly once and fan-out gradients are summed.

Arrays are numpy buffers in channels-last layout.  The working precision is
float32 by default; :func:`precision` switches to float64 for gradient
checking.
"""

from __future__ import annotations

import contextlib
import json
import struct
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

_DTYPE: type = np.float32
_GRAD_ENABLED = True

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def default_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def precision(dtype: str | type) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (evaluation mode)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An n-dimensional array that may participate in differentiation.

    Tensors are treated as immutable once created by an operation; only
    leaves (parameters) are updated in place by optimizers.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        dtype=None,
        _parents: tuple[Tensor, ...] = (),
        _backward: BackwardFn | None = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), dtype=like.dtype)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    """Create an op output, recording it only if some parent needs grads."""
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, dtype=data.dtype)
    return Tensor(data, requires_grad=True, dtype=data.dtype, _parents=parents, _backward=fn)


# -- broadcasting ------------------------------------------------------------
def broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    """Right-aligned broadcast: extents match if equal or one of them is 1."""
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        x = a[-i] if i <= len(a) else 1
        y = b[-i] if i <= len(b) else 1
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"cannot broadcast shapes {tuple(a)} and {tuple(b)}")
        out.append(max(x, y) if min(x, y) != 0 else 0)
    return tuple(reversed(out))


def unbroadcast(grad: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` over the axes that were broadcast."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(a, b):
    a = as_tensor(a)
    b = _lift(b, a)
    broadcast_shape(a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b)

    def fn(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)

    def fn(g):
        return unbroadcast(g, a.shape), -unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = _binary(a, b)

    def fn(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data / b.data

    def fn(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), fn)


def elementwise(kind: str, a, b) -> Tensor:
    """Dispatch a named binary op: ``add``, ``sub``, ``mul`` or ``div``."""
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind not in ops:
        raise ValueError(f"unknown elementwise op {kind!r}; expected one of {sorted(ops)}")
    return ops[kind](a, b)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


# -- reductions and shape ops -------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), fn)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(np.asarray(out), (x,), fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along ``axis``; other extents must agree."""
    tensors = list(tensors)
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != axis and t.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeError(f"cannot concatenate shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return _make(out, tuple(tensors), fn)


def flip(x: Tensor, axis: int) -> Tensor:
    """Reverse ``x`` along one axis (used for temporal reversal)."""
    out = np.flip(x.data, axis=axis).copy()
    return _make(out, (x,), lambda g: (np.flip(g, axis=axis).copy(),))


# -- linear algebra ------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a ``[..., m, k]`` and ``[k, n]`` operand."""
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), fn)


def matmul_vec(W: Tensor, x: Tensor, b: Tensor) -> Tensor:
    """Affine map ``W x + b`` with a square ``W``.

    ``x`` may carry leading batch axes; the map acts on the last axis.
    """
    n = W.shape[0]
    if W.ndim != 2 or W.shape[1] != n:
        raise ShapeError(f"W must be square, got {W.shape}")
    if x.shape[-1] != n or b.shape != (n,):
        raise ShapeError(f"dimension mismatch: W {W.shape}, x {x.shape}, b {b.shape}")
    out = x.data @ W.data.T + b.data

    def fn(g):
        gW = gx = gb = None
        if W.requires_grad:
            gW = g.reshape(-1, n).T @ x.data.reshape(-1, n)
        if x.requires_grad:
            gx = g @ W.data
        if b.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        return gW, gx, gb

    return _make(out, (W, x, b), fn)


# -- backward pass -------------------------------------------------------------
def _topological(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) to every reachable leaf that requires grad.

    Leaf gradients accumulate into ``.grad``; the returned mapping holds the
    gradient contributed by this call for each such leaf.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# -- checkpoints ---------------------------------------------------------------
CHECKPOINT_MAGIC = b"STCK1"


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named arrays as ``STCK1`` + manifest length + JSON manifest + raw data.

    Buffers are little-endian and laid out in manifest order; offsets are
    relative to the first byte after the manifest.
    """
    manifest = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": 1, "tensors": manifest}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an STCK1 checkpoint")
    (hlen,) = struct.unpack("<Q", blob[5:13])
    header = json.loads(blob[13 : 13 + hlen])
    base = 13 + hlen
    out = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        start = base + entry["offset"]
        arr = np.frombuffer(blob, dtype=dt, count=int(np.prod(entry["shape"], dtype=np.int64)), offset=start)
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="))
    return out
