"""Dense n-d tensors with reverse-mode automatic differentiation.

Row-major numpy storage, a tape-free graph of backward closures, and a
central-difference gradient checker. Precision (float32 for training,
float64 for gradient checks) is a per-run module setting, not a
per-tensor one.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    DeterminismError,
    DimensionError,
)

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    """Select the run-wide precision ("float32", "float64", or a numpy dtype)."""
    global _default_dtype
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ConfigurationError(f"unknown precision {dtype!r}; use 'float32' or 'float64'")
        dtype = _DTYPES[dtype]
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported dtype {dtype!r}")
    _default_dtype = dtype


def default_dtype():
    return _default_dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default precision."""
    saved = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(saved)


@contextmanager
def no_grad():
    """Disable graph construction (inference / numeric-probe blocks)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


# A backward closure maps the upstream gradient to (parent, local gradient) pairs.
BackwardFn = Callable[[np.ndarray], Iterable[tuple["Tensor", np.ndarray]]]


class Tensor:
    """N-dimensional array node; `requires_grad` leaves accumulate into `.grad`."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def _node(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = True
        out.grad = None
        out._parents = parents
        out._backward = backward
        return out

    @classmethod
    def _const(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._const(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._const(np.asarray(x, dtype=_default_dtype))


def _track(*tensors: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data
    if not _track(a, b):
        return Tensor._const(data)

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g, a.data.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g, b.data.shape)))
        return out

    return Tensor._node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    if not _track(a, b):
        return Tensor._const(data)

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g * b.data, a.data.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g * a.data, b.data.shape)))
        return out

    return Tensor._node(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; operands may carry leading (broadcastable) batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    if not (np.isfinite(a.data).all() and np.isfinite(b.data).all()):
        raise ContractError("matmul operands must be finite")
    data = a.data @ b.data
    if not _track(a, b):
        return Tensor._const(data)

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)))
        return out

    return Tensor._node(data, (a, b), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)
    if not _track(x):
        return Tensor._const(data)

    def backward(g):
        return [(x, g * (x.data > 0))]

    return Tensor._node(data, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)
    if not _track(x):
        return Tensor._const(data)

    def backward(g):
        return [(x, g.reshape(x.data.shape))]

    return Tensor._node(data, (x,), backward)


def permute(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    data = x.data.transpose(axes)
    if not _track(x):
        return Tensor._const(data)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return [(x, g.transpose(inverse))]

    return Tensor._node(data, (x,), backward)


def transpose2d(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose2d expects a matrix, got shape {x.data.shape}")
    return permute(x, (1, 0))


def slice_tensor(x, key: tuple) -> Tensor:
    """Basic (non-strided) slicing along any axes."""
    x = _as_tensor(x)
    data = x.data[key]
    if not _track(x):
        return Tensor._const(data)

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return [(x, full)]

    return Tensor._node(data, (x,), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    if not _track(*parts):
        return Tensor._const(data)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(lo), int(hi))
                out.append((p, g[tuple(idx)]))
        return out

    return Tensor._node(data, tuple(parts), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids (any int shape) -> ids.shape + (d,)."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding ids must be integers")
    data = table.data[ids]
    if not _track(table):
        return Tensor._const(data)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return [(table, gt)]

    return Tensor._node(data, (table,), backward)


def softmax_lastdim(x) -> Tensor:
    """Max-subtracted softmax over the last dimension."""
    x = _as_tensor(x)
    if x.ndim < 1 or x.data.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last dimension, got shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)
    if not _track(x):
        return Tensor._const(data)

    def backward(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        return [(x, data * (g - inner))]

    return Tensor._node(data, (x,), backward)


def log_softmax_lastdim(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim < 1 or x.data.shape[-1] < 1:
        raise DimensionError(f"log_softmax needs a non-empty last dimension, got shape {x.data.shape}")
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    if not _track(x):
        return Tensor._const(data)

    def backward(g):
        return [(x, g - np.exp(data) * g.sum(axis=-1, keepdims=True))]

    return Tensor._node(data, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Standardize the last dimension, then scale/shift by gain/bias."""
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be positive, got {eps}")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.data.shape} and {bias.data.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = gain.data * xhat + bias.data
    if not _track(x, gain, bias):
        return Tensor._const(data)

    def backward(g):
        out = []
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            out.append((gain, (g * xhat).sum(axis=lead)))
        if bias.requires_grad:
            out.append((bias, g.sum(axis=lead)))
        if x.requires_grad:
            gx_hat = g * gain.data
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            out.append((x, inv * (gx_hat - m1 - xhat * m2)))
        return out

    return Tensor._node(data, (x, gain, bias), backward)


def tsum(x) -> Tensor:
    """Sum of all elements (scalar output)."""
    x = _as_tensor(x)
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)
    if not _track(x):
        return Tensor._const(data)

    def backward(g):
        return [(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False))]

    return Tensor._node(data, (x,), backward)


def tmean(x) -> Tensor:
    x = _as_tensor(x)
    return mul(tsum(x), 1.0 / x.data.size)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# reverse-mode sweep
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into `.grad` of every requires_grad node.

    Repeated calls (without `zero_grads`) add into existing gradients.
    """
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")

    # iterative topological order (graphs are deep; recursion would overflow)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in node._backward(g):
            acc = flowing.get(id(parent))
            flowing[id(parent)] = pg if acc is None else acc + pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    """Worst-case analytic-vs-central-difference comparison.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-3) so that
    float noise on near-zero gradient elements does not swamp the metric.
    """

    max_abs_err: float
    max_rel_err: float
    worst_index: int
    analytic: float
    numeric: float
    worst_param: str = ""


_REL_FLOOR = 1e-3


def gradient_check(
    f: Callable[[], Tensor],
    params,
    h: float = 1e-5,
    samples_per_tensor: int = 32,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare backward() gradients of scalar f() against central differences.

    `params` is a mapping name -> Tensor or a sequence of Tensors. Large
    tensors are subsampled to `samples_per_tensor` elements (at least 32).
    Requires float64 precision and a deterministic f.
    """
    if _default_dtype is not np.float64:
        raise ConfigurationError("gradient_check requires float64 precision (see precision())")
    if not (1e-6 <= h <= 1e-3):
        raise ConfigurationError(f"step size h must lie in [1e-6, 1e-3], got {h}")
    if samples_per_tensor < 32:
        raise ConfigurationError("samples_per_tensor must be >= 32")
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(f"param{i}", p) for i, p in enumerate(params)]
    rng = rng if rng is not None else np.random.default_rng(0)

    with no_grad():
        v1 = float(f().data)
        v2 = float(f().data)
    if v1 != v2:
        raise DeterminismError(f"f() is not deterministic: {v1!r} vs {v2!r}")

    zero_grads(p for _, p in named)
    loss = f()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in named}

    max_abs = 0.0
    max_rel = 0.0
    worst: tuple[int, float, float, str] = (0, 0.0, 0.0, "")
    for name, p in named:
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= samples_per_tensor:
            indices = np.arange(n)
        else:
            indices = rng.choice(n, size=samples_per_tensor, replace=False)
        a_flat = analytic[name].reshape(-1)
        for idx in indices:
            idx = int(idx)
            orig = flat[idx]
            with no_grad():
                flat[idx] = orig + h
                fp = float(f().data)
                flat[idx] = orig - h
                fm = float(f().data)
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(a_flat[idx])
            abs_err = abs(a - numeric)
            rel_err = abs_err / max(abs(a), abs(numeric), _REL_FLOOR)
            max_abs = max(max_abs, abs_err)
            if rel_err > max_rel:
                max_rel = rel_err
                worst = (idx, a, numeric, name)
    return GradReport(max_abs, max_rel, worst[0], worst[1], worst[2], worst[3])
