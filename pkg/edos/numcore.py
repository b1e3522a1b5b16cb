"""Dense tensors with reverse-mode automatic differentiation.

Every trainable block of the stack is composed from the primitives below.
Storage is a row-major numpy array. Each primitive records the inputs that
require gradients together with a closure that pushes the output gradient
back to them; ``Tensor.backward`` replays those closures in reverse
topological order.

Precision is float32 unless a ``float64()`` block is active (gradient checks
run in 64-bit mode). All randomness goes through explicit
``numpy.random.Generator`` handles built by ``make_rng``.
"""

from __future__ import annotations

import contextlib
import contextvars
import logging
import math
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100

_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar(
    "edos_dtype", default=np.float32
)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "edos_grad_enabled", default=True
)

_GELU_C = math.sqrt(2.0 / math.pi)


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Create new tensors with ``dtype`` inside the block."""
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


def float64():
    return precision(np.float64)


def default_dtype() -> type:
    return _DTYPE.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a graph."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def make_rng(*seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by the given seed parts."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(seed))))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=default_dtype() if dtype is None else dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every leaf that requires it.

        Leaf gradients accumulate across calls; zero them between steps.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            if node._backward is not None:
                node.grad = None
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other) -> Tensor:
        return sub(other, self)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, key) -> Tensor:
        return take(self, key)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], None],
    op: str,
) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    tracked = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(tracked) and _GRAD_ENABLED.get()
    out._parents = tracked if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    return out


def _accumulate(node: Tensor, grad: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(grad, dtype=node.data.dtype)
    else:
        node.grad = node.grad + grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


# -- elementwise and structural primitives ------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum; broadcasting over leading (or singleton) axes."""
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> None:
        for t, part in zip(tensors, np.split(g, bounds, axis=axis)):
            _accumulate(t, part)

    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat"
    )


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Inverse of ``concat`` along ``axis``."""
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of {x.shape}")
    parts, start = [], 0
    axis = axis % x.ndim
    for size in sizes:
        key = tuple(slice(None) for _ in range(axis)) + (slice(start, start + size),)
        parts.append(take(x, key))
        start += size
    return parts


def take(x: Tensor, key) -> Tensor:
    """Basic or advanced indexing, ``x[key]``."""

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        _accumulate(x, full)

    return _result(np.array(x.data[key]), (x,), backward, "take")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.transpose(g, inverse))

    return _result(np.transpose(x.data, axes), (x,), backward, "transpose")


def swapaxes(x: Tensor, a: int = -1, b: int = -2) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g: np.ndarray) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(out.size, 1)

    def backward(g: np.ndarray) -> None:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape) / count)

    return _result(out, (x,), backward, "mean")


# -- activations and normalisation --------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    if np.isnan(x.data).any():
        raise NumericalError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _result(s, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Affine layer normalisation over the last axis (1/N variance)."""
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(
            f"layer_norm gain/bias {gamma.shape}/{beta.shape} do not match width {width}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    denom = var + eps
    if np.any(denom == 0):
        raise ZeroDivisionError("layer_norm: zero variance and eps=0")
    inv_std = 1.0 / np.sqrt(denom)
    xhat = centred * inv_std

    def backward(g: np.ndarray) -> None:
        gxhat = g * gamma.data
        dx = (inv_std / width) * (
            width * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        _accumulate(x, dx)
        _accumulate(gamma, _unbroadcast(g * xhat, gamma.shape))
        _accumulate(beta, _unbroadcast(g, beta.shape))

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    inner = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)

    def backward(g: np.ndarray) -> None:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner
        _accumulate(x, g * local)

    return _result(0.5 * x.data * (1.0 + t), (x,), backward, "gelu")


def relu(x: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * (x.data > 0))

    return _result(np.maximum(x.data, 0), (x,), backward, "relu")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``."""
    ids = np.asarray(ids)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError(f"token id out of range for embedding table of {vocab} rows")

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        _accumulate(weight, full)

    return _result(weight.data[ids], (weight,), backward, "embedding")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Identity when ``rng`` is None (eval mode) or rate is 0."""
    if rng is None or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ShapeError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * keep)

    return _result(x.data * keep, (x,), backward, "dropout")


def gather_last(x: Tensor, index: np.ndarray) -> Tensor:
    """``out[..., i, j] = x[..., i, index[i, j]]`` for ``x`` of shape (..., L, R)."""
    index = np.asarray(index)
    rows, width = x.shape[-2], x.shape[-1]
    if index.ndim != 2 or index.shape[0] != rows:
        raise ShapeError(f"gather index {index.shape} does not match rows of {x.shape}")
    onehot = np.eye(width, dtype=x.dtype)[index]

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.einsum("...lm,lmr->...lr", g, onehot))

    return _result(np.einsum("...lr,lmr->...lm", x.data, onehot), (x,), backward, "gather")


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    ignore_index: int = IGNORE_INDEX,
    weights: np.ndarray | None = None,
) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over non-ignored positions.

    ``weights`` (one per class) turns the mean into a weighted mean.
    """
    classes = logits.shape[-1]
    z = logits.data.reshape(-1, classes)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for {z.shape[0]} rows of logits")
    valid = t != ignore_index
    if np.any((t[valid] < 0) | (t[valid] >= classes)):
        raise ShapeError(f"target class out of range for {classes} classes")
    if not valid.any():
        return Tensor(0.0, dtype=logits.dtype)
    rows = np.nonzero(valid)[0]
    picked = t[valid]
    w = np.ones(len(rows), dtype=z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype)[picked]
    total = w.sum()
    m = z[rows].max(axis=-1, keepdims=True)
    e = np.exp(z[rows] - m)
    lse = np.log(e.sum(axis=-1)) + m[:, 0]
    nll = lse - z[rows, picked]
    loss = np.asarray((w * nll).sum() / total, dtype=z.dtype)

    def backward(g: np.ndarray) -> None:
        p = e / e.sum(axis=-1, keepdims=True)
        p[np.arange(len(rows)), picked] -= 1.0
        full = np.zeros_like(z)
        full[rows] = p * (w / total)[:, None] * g
        _accumulate(logits, full.reshape(logits.shape))

    return _result(loss, (logits,), backward, "cross_entropy")


# -- parameters -----------------------------------------------------------------


def init_normal(rng: np.random.Generator, shape: Sequence[int], std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=tuple(shape)).astype(default_dtype())


class ParamStore(Mapping[str, Tensor]):
    """Named trainable tensors, iterated in insertion order."""

    def __init__(self, tensors: Mapping[str, Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        for name, tensor in (tensors or {}).items():
            self.register(name, tensor)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def add(self, name: str, data) -> Tensor:
        return self.register(name, Tensor(data, requires_grad=True))

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"parameter {name!r} already registered")
        tensor.requires_grad = True
        self._tensors[name] = tensor
        return tensor

    def sub(self, prefix: str) -> ParamStore:
        """Tensors under ``prefix`` with the prefix stripped (shared, not copied)."""
        return ParamStore(
            {k[len(prefix):]: t for k, t in self._tensors.items() if k.startswith(prefix)}
        )

    def prefixed(self, prefix: str) -> ParamStore:
        return ParamStore({prefix + k: t for k, t in self._tensors.items()})

    def merge(self, other: Mapping[str, Tensor]) -> None:
        for name, tensor in other.items():
            self.register(name, tensor)

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.grad = None

    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: t.grad for k, t in self._tensors.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy ``arrays`` into the existing storage; returns the names loaded."""
        missing = [k for k in self._tensors if k not in arrays]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing}")
        loaded = []
        for name, tensor in self._tensors.items():
            if name not in arrays:
                continue
            value = np.asarray(arrays[name])
            if value.shape != tensor.shape:
                raise ShapeError(f"{name}: shape {value.shape} != {tensor.shape}")
            tensor.data[...] = value
            loaded.append(name)
        return loaded

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self._tensors.values())


# -- verification -----------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    h: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` must be deterministic and return a scalar; every parameter must be
    float64. ``sample`` limits the number of coordinates checked per tensor.
    """
    tensors = list(params.values()) if isinstance(params, Mapping) else list(params)
    for t in tensors:
        if t.dtype != np.float64:
            raise NumericalError("grad_check needs float64 parameters (use numcore.float64())")

    with no_grad():
        first, second = f().data, f().data
    if not np.array_equal(first, second):
        raise NumericalError("grad_check: f is not deterministic (is dropout enabled?)")

    for t in tensors:
        t.grad = None
    f().backward()

    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = range(flat.size)
        if sample is not None and sample < flat.size:
            chooser = rng or make_rng(0)
            coords = sorted(chooser.choice(flat.size, size=sample, replace=False))
        for i in coords:
            original = flat[i]
            with no_grad():
                flat[i] = original + h
                plus = float(f().data)
                flat[i] = original - h
                minus = float(f().data)
            flat[i] = original
            numeric = (plus - minus) / (2 * h)
            exact = float(analytic.reshape(-1)[i])
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, err)
    logger.debug("grad_check max relative error %.3e", worst)
    return worst
