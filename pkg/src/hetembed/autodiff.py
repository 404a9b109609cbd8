"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the model needs are provided. Operations record onto the
active :class:`Tape` when one is open and at least one input requires a
gradient; outside a tape they run as plain numpy computations.

    with Tape() as tape:
        loss = cross_entropy(matmul(x, w), label)
    grads = tape.backward(loss)
    grads[w]  # ndarray shaped like w
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "DimensionError",
    "EmptyNeighborhoodError",
    "Tensor",
    "Tape",
    "GradientMap",
    "AdamState",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "hadamard",
    "neg",
    "reshape",
    "concat",
    "take",
    "leaky_relu",
    "tanh",
    "softmax",
    "log_softmax",
    "max_pool",
    "tensor_sum",
    "mean",
    "segment_sum",
    "segment_mean",
    "segment_max",
    "segment_softmax",
    "cross_entropy",
    "backward",
    "adam_step",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class EmptyNeighborhoodError(ValueError):
    """Raised when a pooling or normalization is asked to reduce an empty set."""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "hetembed_active_tape", default=None
)


class Tensor:
    """Immutable float64 array plus a gradient flag.

    NaN and Inf entries are rejected at construction so that a non-finite
    value surfaces at the operation that produced it.
    """

    __slots__ = ("data", "requires_grad", "name", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)  # always a private copy
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite value in tensor{' ' + name if name else ''}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal constructor for op results; avoids the defensive copy.
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite value produced by tensor operation")
        arr.flags.writeable = False
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradientMap(dict):
    """Tensor -> gradient array, keyed by tensor identity."""

    def __missing__(self, key):
        raise KeyError(f"no gradient recorded for {key!r}")


@dataclass
class Tape:
    """Ordered record of primitive applications for one forward pass."""

    records: list[_Record] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise RuntimeError("tape is already active")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def leaves(self) -> list[Tensor]:
        """Gradient-requiring inputs that were not produced on this tape."""
        produced = {id(r.output) for r in self.records}
        seen: dict[int, Tensor] = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> GradientMap:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        targets = list(wrt) if wrt is not None else self.leaves()
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            in_grads = rec.vjp(g_out)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = g if prev is None else prev + g
        out = GradientMap()
        for t in targets:
            g = grads.get(id(t))
            out[t] = np.zeros_like(t.data) if g is None else np.asarray(g).reshape(t.shape)
        return out


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> GradientMap:
    """Gradients of a scalar ``loss`` with respect to ``wrt`` (or every leaf)."""
    if loss._tape is None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        targets = list(wrt) if wrt is not None else []
        return GradientMap({t: np.zeros_like(t.data) for t in targets})
    return loss._tape.backward(loss, wrt)


def _record(op: str, inputs: tuple[Tensor, ...], out_arr: np.ndarray, vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_arr, needs)
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        out._tape = tape
        tape.records.append(_Record(op, inputs, out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _scatter_add(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """``out[index[k]] += values[k]`` summed in row order (deterministic)."""
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=n).astype(np.float64)
    flat = values.reshape(values.shape[0], -1)
    onehot = sparse.csr_matrix(
        (np.ones(index.shape[0]), (index, np.arange(index.shape[0]))), shape=(n, index.shape[0])
    )
    return np.asarray(onehot @ flat).reshape((n,) + values.shape[1:])


def _segment_order(seg: np.ndarray, n: int):
    """Stable sort permutation and segment start offsets (every segment nonempty)."""
    if seg.size > 1 and np.all(seg[1:] >= seg[:-1]):
        order = None
        sorted_seg = seg
    else:
        order = np.argsort(seg, kind="stable")
        sorted_seg = seg[order]
    starts = np.searchsorted(sorted_seg, np.arange(n))
    return order, starts


# --------------------------------------------------------------------------
# linear algebra and elementwise arithmetic


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.ndim > 2 or b.ndim > 2:
        raise DimensionError(f"matmul supports rank 1-2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def vjp(g):
        # promote vectors to matrices so both cases share one formula
        A2 = A if A.ndim == 2 else A[None, :]
        B2 = B if B.ndim == 2 else B[:, None]
        G = g.reshape(A2.shape[0], B2.shape[1])
        ga = (G @ B2.T).reshape(A.shape) if a.requires_grad else None
        gb = (A2.T @ G).reshape(B.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), out, vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _record("add", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc
    return _record("sub", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Broadcasting elementwise product (used for scalar and row weights)."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    try:
        out = A * B
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return _record("mul", (a, b), out, lambda g: (_unbroadcast(g * B, a.shape), _unbroadcast(g * A, b.shape)))


def hadamard(u, v) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise DimensionError(f"hadamard needs identical shapes, got {u.shape} and {v.shape}")
    U, V = u.data, v.data
    return _record("hadamard", (u, v), U * V, lambda g: (g * V, g * U))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def concat(*tensors, axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; ``concat(u, v)`` is u followed by v."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise DimensionError("concat needs at least one operand")
    ranks = {t.ndim for t in ts}
    if len(ranks) != 1 or 0 in ranks:
        raise DimensionError(f"concat rank mismatch: {[t.shape for t in ts]}")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in ts]}") from exc
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record("concat", ts, out, vjp)


def take(a, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate in backward."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    out = a.data[idx]

    def vjp(g):
        return (_scatter_add(idx.reshape(-1), g.reshape((-1,) + a.shape[1:]), a.shape[0]),)

    return _record("take", (a,), out, vjp)


# --------------------------------------------------------------------------
# nonlinearities


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    mask = x.data >= 0
    factor = np.where(mask, 1.0, slope)
    return _record("leaky_relu", (x,), x.data * factor, lambda g: (g * factor,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 1:
        raise DimensionError(f"softmax expects a vector, got shape {x.shape}")
    if x.shape[0] == 0:
        raise EmptyNeighborhoodError("softmax over an empty vector")
    y = _stable_softmax(x.data)
    return _record("softmax", (x,), y, lambda g: (y * (g - np.dot(g, y)),))


def log_softmax(x) -> Tensor:
    """Row-wise log-softmax of a vector or a matrix."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record("log_softmax", (x,), out, lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def max_pool(vectors: Sequence) -> Tensor:
    """Coordinate-wise maximum over a nonempty set of equal-shape vectors.

    The gradient of each coordinate goes to a single contributor; on ties the
    lowest input index wins.
    """
    ts = tuple(as_tensor(v) for v in vectors)
    if not ts:
        raise EmptyNeighborhoodError("max_pool over an empty neighborhood")
    if len({t.shape for t in ts}) != 1:
        raise DimensionError(f"max_pool shape mismatch: {[t.shape for t in ts]}")
    stacked = np.stack([t.data for t in ts])
    winner = stacked.argmax(axis=0)  # argmax returns the first maximal index
    out = np.take_along_axis(stacked, winner[None], axis=0)[0]

    def vjp(g):
        return tuple(np.where(winner == k, g, 0.0) for k in range(len(ts)))

    return _record("max_pool", ts, out, vjp)


# --------------------------------------------------------------------------
# reductions


def tensor_sum(x) -> Tensor:
    x = as_tensor(x)
    return _record("sum", (x,), np.sum(x.data), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _record("mean", (x,), np.mean(x.data), lambda g: (np.full(x.shape, float(g) / n),))


def _check_segments(x: Tensor, segments: np.ndarray, n: int) -> None:
    if segments.shape != (x.shape[0],):
        raise DimensionError(f"segment ids shape {segments.shape} does not match rows {x.shape[0]}")
    if segments.size and (segments.min() < 0 or segments.max() >= n):
        raise DimensionError("segment id out of range")


def segment_sum(x, segments, n_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``n_segments`` buckets (ordered accumulation)."""
    x = as_tensor(x)
    seg = np.asarray(segments, dtype=np.intp)
    _check_segments(x, seg, n_segments)
    out = _scatter_add(seg, x.data, n_segments)
    return _record("segment_sum", (x,), out, lambda g: (g[seg],))


def segment_mean(x, segments, n_segments: int) -> Tensor:
    x = as_tensor(x)
    seg = np.asarray(segments, dtype=np.intp)
    _check_segments(x, seg, n_segments)
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    if np.any(counts == 0):
        raise EmptyNeighborhoodError("segment_mean over an empty segment")
    shape = (-1,) + (1,) * (x.ndim - 1)
    inv = (1.0 / counts).reshape(shape)
    out = _scatter_add(seg, x.data, n_segments) * inv
    return _record("segment_mean", (x,), out, lambda g: ((g * inv)[seg],))


def segment_max(x, segments, n_segments: int) -> Tensor:
    """Coordinate-wise max of rows per segment; ties route to the lowest row."""
    x = as_tensor(x)
    seg = np.asarray(segments, dtype=np.intp)
    _check_segments(x, seg, n_segments)
    if np.any(np.bincount(seg, minlength=n_segments) == 0):
        raise EmptyNeighborhoodError("segment_max over an empty segment")
    X = x.data
    order, starts = _segment_order(seg, n_segments)
    sorted_seg = seg if order is None else seg[order]
    rank = np.arange(X.shape[0]) - starts[sorted_seg]
    # dense (segment, slot, ...) layout; argmax picks the first slot, i.e. the lowest row
    padded = np.full((n_segments, int(rank.max()) + 1) + X.shape[1:], -np.inf)
    padded[sorted_seg, rank] = X if order is None else X[order]
    slot = padded.argmax(axis=1)
    out = np.take_along_axis(padded, slot[:, None], axis=1)[:, 0]
    first = starts.reshape((-1,) + (1,) * (X.ndim - 1)) + slot
    winner = first if order is None else order[first]

    def vjp(g):
        gx = np.zeros_like(X)
        if X.ndim == 1:
            gx[winner] = g  # winners are distinct rows per segment
        else:
            cols = np.broadcast_to(np.arange(X.shape[1]), winner.shape)
            gx[winner, cols] = g
        return (gx,)

    return _record("segment_max", (x,), out, vjp)


def segment_softmax(x, segments, n_segments: int) -> Tensor:
    """Softmax of a score vector within each segment (max-shifted)."""
    x = as_tensor(x)
    seg = np.asarray(segments, dtype=np.intp)
    if x.ndim != 1:
        raise DimensionError(f"segment_softmax expects a vector, got shape {x.shape}")
    _check_segments(x, seg, n_segments)
    if np.any(np.bincount(seg, minlength=n_segments) == 0):
        raise EmptyNeighborhoodError("segment_softmax over an empty segment")
    z = x.data
    order, starts = _segment_order(seg, n_segments)
    peak = np.maximum.reduceat(z if order is None else z[order], starts)
    e = np.exp(z - peak[seg])
    denom = _scatter_add(seg, e, n_segments)
    y = e / denom[seg]

    def vjp(g):
        dot = _scatter_add(seg, g * y, n_segments)
        return (y * (g - dot[seg]),)

    return _record("segment_softmax", (x,), y, vjp)


def cross_entropy(logits, label) -> Tensor:
    """Negative log-likelihood of the true class.

    A vector of logits with an integer label gives the single-example loss;
    a matrix with a label array gives the mean over rows.
    """
    logits = as_tensor(logits)
    Z = logits.data
    if Z.ndim == 1:
        labels = np.asarray([label], dtype=np.intp)
        Z2 = Z[None, :]
    elif Z.ndim == 2:
        labels = np.asarray(label, dtype=np.intp).reshape(-1)
        Z2 = Z
        if labels.shape[0] != Z.shape[0]:
            raise DimensionError(f"{labels.shape[0]} labels for {Z.shape[0]} rows of logits")
    else:
        raise DimensionError(f"cross_entropy expects rank 1 or 2 logits, got {Z.shape}")
    n, C = Z2.shape
    if n == 0:
        raise EmptyNeighborhoodError("cross_entropy over an empty batch")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"label out of range [0, {C})")
    shifted = Z2 - Z2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(n), labels]
    loss = max(float(nll.mean()), 0.0)

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return ((float(g) / n * p).reshape(Z.shape),)

    return _record("cross_entropy", (logits,), np.float64(loss), vjp)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 0.005,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update. Returns new arrays; inputs are untouched.

    Parameters without an entry in ``grads`` are treated as having zero gradient.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new
