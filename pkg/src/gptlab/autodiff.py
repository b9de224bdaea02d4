"""Dense 2-D/3-D real tensors with tape-based reverse-mode differentiation.

Every tensor wraps a numpy float array. Operations executed while grad
recording is on append one entry to the thread-local tape; ``backward``
replays the tape once in reverse, accumulating gradients additively into
every tensor that ``requires_grad``.

Verification suites run in float64, training runs in float32; the dtype
of a result follows numpy promotion of its inputs, so a graph stays in
whatever precision its leaves were created with.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    DoubleBackwardError,
    EmptyLossError,
    GptLabError,
    InvalidMaskError,
    ShapeError,
    VocabError,
)

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))


class Tensor:
    """A dense real tensor, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # Operator sugar; the module-level functions are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed operations for one reverse pass."""

    __slots__ = ("entries", "consumed")

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...],
               vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        self.entries.append((out, inputs, vjp))

    def __len__(self) -> int:
        return len(self.entries)


_tls = threading.local()


def _state():
    if not hasattr(_tls, "tape"):
        _tls.tape = Tape()
        _tls.grad_enabled = True
    return _tls


def active_tape() -> Tape:
    return _state().tape


def reset_tape() -> Tape:
    """Install and return a fresh tape for the current thread."""
    st = _state()
    st.tape = Tape()
    return st.tape


def grad_enabled() -> bool:
    return _state().grad_enabled


class no_grad:
    """Context manager that suspends tape recording (pure evaluation)."""

    def __enter__(self):
        st = _state()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state().grad_enabled = self._prev
        return False


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=False)


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
    if out.requires_grad and grad_enabled():
        active_tape().record(out, inputs, vjp)


def _wants_grad(*tensors: Tensor) -> bool:
    return grad_enabled() and any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from ``loss``.

    Replays the active tape in reverse exactly once; a tensor consumed by
    k operations receives the sum of the k contributions. A second call
    without ``reset_tape`` raises DoubleBackwardError.
    """
    tape = active_tape()
    if tape.consumed:
        raise DoubleBackwardError(
            "backward() already ran on this tape; call reset_tape() first")
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GptLabError("loss is not connected to the active tape")
    if not any(out is loss for out, _, _ in tape.entries):
        raise GptLabError("loss was not produced by the active tape")
    tape.consumed = True
    loss.accumulate_grad(np.ones_like(loss.data))
    for out, inputs, vjp in reversed(tape.entries):
        if out.grad is None:
            continue  # not on the path from loss
        grads = vjp(out.grad)
        for t, g in zip(inputs, grads):
            if g is not None and t.requires_grad:
                t.accumulate_grad(g)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# --- operations ---

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, requires_grad=_wants_grad(a, b))

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    _record(out, (a, b), vjp)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data, requires_grad=_wants_grad(a))
    _record(out, (a,), lambda g: (-g,))
    return out


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product; python scalars act as constants."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, requires_grad=_wants_grad(a, b))
    a_data, b_data = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * b_data, a.shape),
                _unbroadcast(g * a_data, b.shape))

    _record(out, (a, b), vjp)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with dA = dC·Bᵀ, dB = Aᵀ·dC."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_wants_grad(a, b))
    a_data, b_data = a.data, b.data

    def vjp(g):
        return g @ b_data.T, a_data.T @ g

    _record(out, (a, b), vjp)
    return out


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")
    out = Tensor(a.data.T.copy(), requires_grad=_wants_grad(a))
    _record(out, (a,), lambda g: (g.T,))
    return out


def softmax_rows(m: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax with optional boolean mask.

    Masked entries get weight exactly 0 and every row sums to 1; the max
    is taken over unmasked entries only, so masked garbage can never leak
    into the finite part of the computation.
    """
    m = _as_tensor(m)
    if m.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {m.shape}")
    x = m.data
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != x.shape:
            raise ShapeError(
                f"mask shape {keep.shape} does not match tensor {x.shape}")
        if not keep.any(axis=1).all():
            raise InvalidMaskError("softmax row with every entry masked")
    neg_inf = np.finfo(x.dtype).min
    row_max = np.max(np.where(keep, x, neg_inf), axis=1, keepdims=True)
    e = np.exp(np.where(keep, x - row_max, -np.inf))  # masked -> exactly 0
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s, requires_grad=_wants_grad(m))

    def vjp(g):
        gs = g * s
        return (gs - s * gs.sum(axis=1, keepdims=True),)

    _record(out, (m,), vjp)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps < 0:
        raise ShapeError("layer_norm eps must be >= 0")
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-D tensor, got {x.shape}")
    h = x.shape[1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError(
            f"gamma/beta must have shape ({h},), got {gamma.shape}/{beta.shape}")
    mean = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = Tensor(xhat * gamma.data + beta.data,
                 requires_grad=_wants_grad(x, gamma, beta))
    gamma_data = gamma.data

    def vjp(g):
        dxhat = g * gamma_data
        # standard layer-norm backward over the row axis
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        return dx, dgamma, dbeta

    _record(out, (x, gamma, beta), vjp)
    return out


def gelu(x: Tensor) -> Tensor:
    """Elementwise GELU, tanh approximation (fixed for reproducibility)."""
    x = _as_tensor(x)
    d = x.data
    d2 = d * d
    inner = _SQRT_2_OVER_PI * (d + GELU_COEF * d2 * d)
    t = np.tanh(inner)
    out = Tensor(0.5 * d * (1.0 + t), requires_grad=_wants_grad(x))

    def vjp(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * d2)
        dy = 0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner
        return (g * dy,)

    _record(out, (x,), vjp)
    return out


def cross_entropy(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean of -log softmax(logits)[target] over unmasked positions."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy needs 2-D logits, got {logits.shape}")
    n_rows, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    if targets.shape != (n_rows,) or mask.shape != (n_rows,):
        raise ShapeError(
            f"targets/loss_mask must have length {n_rows}, got "
            f"{targets.shape}/{mask.shape}")
    if not mask.any():
        raise EmptyLossError("all positions masked out of the loss")
    live = targets[mask]
    if live.min() < 0 or live.max() >= vocab:
        raise VocabError(
            f"target id out of range for vocab size {vocab}")
    x = logits.data
    row_max = x.max(axis=1, keepdims=True)
    shifted = x - row_max
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + row_max
    nll = lse[:, 0] - x[np.arange(n_rows), targets]
    n_live = int(mask.sum())
    out = Tensor(np.asarray(nll[mask].mean(), dtype=x.dtype),
                 requires_grad=_wants_grad(logits))

    def vjp(g):
        probs = np.exp(x - lse)
        probs[np.arange(n_rows), targets] -= 1.0
        probs[~mask] = 0.0
        return (probs * (g / n_live),)

    _record(out, (logits,), vjp)
    return out


def tensor_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype),
                 requires_grad=_wants_grad(x))
    _record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))
    return out


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of an embedding table; backward scatter-adds."""
    table = _as_tensor(table)
    if table.data.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D table, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows needs a 1-D id list, got shape {idx.shape}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise VocabError(f"row id out of range for table with {n} rows")
    out = Tensor(table.data[idx], requires_grad=_wants_grad(table))

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    _record(out, (table,), vjp)
    return out


def _concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")
    for p in parts:
        if p.data.ndim != 2:
            raise ShapeError(f"concat needs 2-D tensors, got {p.shape}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 requires_grad=_wants_grad(*parts))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.array_split(g, splits, axis=axis))

    _record(out, tuple(parts), vjp)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors vertically (shared column count)."""
    return _concat(parts, axis=0)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors horizontally (shared row count)."""
    return _concat(parts, axis=1)
