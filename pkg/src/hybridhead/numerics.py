"""Dense tensors with reverse-mode gradient accumulation.

Everything the model computes goes through :class:`Tensor`. The graph is built
eagerly during the forward pass; :func:`backward` walks it in reverse
topological order. Storage is a plain numpy array, row-major.

Precision follows the data: build parameters in float64 for tests and oracles,
float32 for toy training. Python scalars never upcast an array.
"""
from __future__ import annotations

import contextlib
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DegenerateRowError",
    "ContractError",
    "RngStream",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "softmax_rows",
    "softplus",
    "sigmoid",
    "silu",
    "exp",
    "log",
    "concat",
    "take_rows",
    "broadcast_to",
    "rms_norm",
    "cross_entropy",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], grad_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = grad_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- elementwise arithmetic ----------------------------------------------
    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other

        def grad_fn(g):
            a._accumulate(g)
            b._accumulate(g)

        return Tensor._make(a.data + b.data, (a, b), grad_fn)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def grad_fn(g):
            a._accumulate(-g)

        return Tensor._make(-a.data, (a,), grad_fn)

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other

        def grad_fn(g):
            a._accumulate(g)
            b._accumulate(-g)

        return Tensor._make(a.data - b.data, (a, b), grad_fn)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def grad_fn(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)

        return Tensor._make(a.data * b.data, (a, b), grad_fn)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other
        out = a.data / b.data

        def grad_fn(g):
            if a.requires_grad:
                a._accumulate(g / b.data)
            if b.requires_grad:
                b._accumulate(-g * out / b.data)

        return Tensor._make(out, (a, b), grad_fn)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self
        out = a.data ** p

        def grad_fn(g):
            a._accumulate(g * p * a.data ** (p - 1))

        return Tensor._make(out, (a,), grad_fn)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape manipulation ---------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        src = a.data.shape

        def grad_fn(g):
            a._accumulate(g.reshape(src))

        return Tensor._make(a.data.reshape(shape), (a,), grad_fn)

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        a = self

        def grad_fn(g):
            a._accumulate(g.transpose(inv))

        return Tensor._make(a.data.transpose(axes), (a,), grad_fn)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def swap_last(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    def __getitem__(self, idx) -> "Tensor":
        a = self
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)

        def grad_fn(g):
            full = np.zeros_like(a.data)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            a._accumulate(full)

        return Tensor._make(a.data[idx], (a,), grad_fn)

    # -- reductions -----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape))

        return Tensor._make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), grad_fn)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            ax = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.data.shape[i] for i in ax]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from exc

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor._make(out, (a, b), grad_fn)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (True = keep) zeroes entries exactly.

    A row with no unmasked entry raises :class:`DegenerateRowError`.
    """
    x = _as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            bad = np.argwhere(~mask.any(axis=-1))
            raise DegenerateRowError(f"softmax row(s) fully masked, first at index {tuple(bad[0])}")
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return Tensor._make(y, (x,), grad_fn)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    x = _as_tensor(x)
    d = x.data
    y = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))

    def grad_fn(g):
        x._accumulate(g * _sigmoid_np(d))

    return Tensor._make(y, (x,), grad_fn)


def _sigmoid_np(d: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid_np(x.data)

    def grad_fn(g):
        x._accumulate(g * s * (1.0 - s))

    return Tensor._make(s, (x,), grad_fn)


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid_np(x.data)
    y = x.data * s

    def grad_fn(g):
        x._accumulate(g * (s + x.data * s * (1.0 - s)))

    return Tensor._make(y, (x,), grad_fn)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)

    def grad_fn(g):
        x._accumulate(g * y)

    return Tensor._make(y, (x,), grad_fn)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def grad_fn(g):
        x._accumulate(g / x.data)

    return Tensor._make(np.log(x.data), (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if len(ts) == 1:
        return ts[0]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def grad_fn(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._make(out, ts, grad_fn)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"row index out of range for table of shape {table.shape}")

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(full)

    return Tensor._make(table.data[ids], (table,), grad_fn)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    x = _as_tensor(x)

    def grad_fn(g):
        x._accumulate(g)

    return Tensor._make(np.broadcast_to(x.data, shape).copy(), (x,), grad_fn)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalisation over the last axis, times ``gain``."""
    scale = ((x * x).mean(axis=-1, keepdims=True) + eps) ** -0.5
    return x * scale * gain


def cross_entropy(logits: Tensor, targets: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Mean token cross-entropy over positions with nonzero ``weight``."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data
    if weight is None:
        weight = np.ones(targets.shape, dtype=z.dtype)
    weight = np.asarray(weight, dtype=z.dtype)
    count = weight.sum()
    if count <= 0:
        raise ContractError("cross_entropy needs at least one weighted position")
    m = z.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(z - m).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    loss = ((lse - picked) * weight).sum() / count

    def grad_fn(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        logits._accumulate(g * p * (weight / count)[..., None])

    return Tensor._make(np.asarray(loss, dtype=z.dtype), (logits,), grad_fn)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Interior nodes only hold transient gradients; leaves keep accumulating
    across calls until :meth:`Tensor.zero_grad`.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    order = _topo_order(loss)
    seed = np.ones_like(loss.data)
    if loss._backward is None:
        loss._accumulate(seed)
        return
    loss.grad = seed
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad
        node.grad = None
        if g is not None:
            node._backward(g)


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


class RngStream:
    """Deterministic random draws from numpy's PCG64 bit generator.

    Child streams are derived with :meth:`child`, keyed by a string, so adding
    a new consumer never shifts the draws of an existing one.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int, key: Sequence[int] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self._key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, name: str) -> "RngStream":
        return RngStream(self.seed, self._key + (zlib.crc32(name.encode("utf-8")),))

    def normal(self, shape, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=np.float64) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def choice(self, seq, size=None, replace: bool = True):
        return self._gen.choice(seq, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self) -> float:
        return float(self._gen.random())
