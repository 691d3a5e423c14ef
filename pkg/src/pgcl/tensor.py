"""Dense float64 matrices with a define-by-run reverse-mode gradient tape.

Every operation that touches a tensor with ``requires_grad=True`` records a
node holding its inputs and a backward rule. Node ids increase with creation
time, so sorting the reachable nodes by id gives a valid topological order;
``backward`` replays that order in reverse, visiting each node once.

Only row-vector (1 x n) and column-vector (n x 1) broadcasting is supported.
"""

from __future__ import annotations

import contextlib
import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_ids = itertools.count(1)
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An operand is outside the domain of an elementwise function."""


class NormalizationWarning(RuntimeWarning):
    """An all-zero vector was left unnormalized."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


class Tensor:
    """A 2-D float64 matrix that may participate in the gradient tape."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_matrix(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.tape_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray, list], None] | None = None
        self._op = "leaf"
        # set when normalizing hit an all-zero vector
        self.warning_flag = False

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          rule: Callable[[np.ndarray, list], None]) -> Tensor:
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -- gradient tape ---------------------------------------------------------

@dataclass
class TapeRecord:
    output_id: int
    input_ids: tuple[int, ...]
    op: str


@dataclass
class GradientTape:
    """Recorded operations reachable from a loss, in topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> GradientTape:
        seen: dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            if t.tape_id in seen:
                continue
            seen[t.tape_id] = t
            stack.extend(t._parents)
        return cls([seen[k] for k in sorted(seen)])

    @property
    def records(self) -> list[TapeRecord]:
        return [TapeRecord(t.tape_id, tuple(p.tape_id for p in t._parents), t._op)
                for t in self.nodes if t._backward is not None]


def backward(loss: Tensor) -> GradientTape:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate across calls; reset them with ``zero_grad``.
    Returns the tape that was replayed.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward() needs a scalar (1x1) loss, got {loss.shape}")
    tape = GradientTape.from_loss(loss)
    # propagation uses per-pass upstream grads; .grad itself accumulates
    upstream: dict[int, np.ndarray] = {loss.tape_id: np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = upstream.pop(node.tape_id, None)
        if g is None:
            continue
        node._accumulate(g)
        if node._backward is None:
            continue
        pairs: list[tuple[Tensor, np.ndarray]] = []
        node._backward(g, pairs)
        for parent, pg in pairs:
            if not parent.requires_grad:
                continue
            prev = upstream.get(parent.tape_id)
            upstream[parent.tape_id] = pg if prev is None else prev + pg
    return tape


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")

    def rule(g, out):
        out.append((a, g @ b.data.T))
        out.append((b, a.data.T @ g))

    return _make(a.data @ b.data, (a, b), "matmul", rule)


def transpose(a: Tensor) -> Tensor:
    def rule(g, out):
        out.append((a, g.T))

    return _make(a.data.T.copy(), (a,), "transpose", rule)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")

    def rule(g, out):
        out.append((a, _unbroadcast(g, a.shape)))
        out.append((b, _unbroadcast(g, b.shape)))

    return _make(a.data + b.data, (a, b), "add", rule)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")

    def rule(g, out):
        out.append((a, _unbroadcast(g, a.shape)))
        out.append((b, _unbroadcast(-g, b.shape)))

    return _make(a.data - b.data, (a, b), "sub", rule)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")

    def rule(g, out):
        out.append((a, _unbroadcast(g * b.data, a.shape)))
        out.append((b, _unbroadcast(g * a.data, b.shape)))

    return _make(a.data * b.data, (a, b), "mul", rule)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: zero in denominator")
    q = a.data / b.data

    def rule(g, out):
        out.append((a, _unbroadcast(g / b.data, a.shape)))
        out.append((b, _unbroadcast(-g * q / b.data, b.shape)))

    return _make(q, (a, b), "div", rule)


def neg(a: Tensor) -> Tensor:
    def rule(g, out):
        out.append((a, -g))

    return _make(-a.data, (a,), "neg", rule)


def scale(a: Tensor, c: float) -> Tensor:
    def rule(g, out):
        out.append((a, g * c))

    return _make(a.data * c, (a,), "scale", rule)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)

    def rule(g, out):
        out.append((a, g * e))

    return _make(e, (a,), "exp", rule)


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log. With ``floor``, inputs are clamped from below first and
    clamped entries receive zero gradient."""
    x = a.data
    if floor is not None:
        active = x > floor
        x = np.where(active, x, floor)
    else:
        if np.any(x <= 0):
            raise DomainError("log: non-positive input")
        active = None

    def rule(g, out):
        ga = g / x
        if active is not None:
            ga = np.where(active, ga, 0.0)
        out.append((a, ga))

    return _make(np.log(x), (a,), "log", rule)


def log1p(a: Tensor) -> Tensor:
    if np.any(a.data <= -1):
        raise DomainError("log1p: input <= -1")

    def rule(g, out):
        out.append((a, g / (1.0 + a.data)))

    return _make(np.log1p(a.data), (a,), "log1p", rule)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def rule(g, out):
        out.append((a, g * mask))

    return _make(a.data * mask, (a,), "relu", rule)


# -- reductions --------------------------------------------------------------

def sum_rows(a: Tensor) -> Tensor:
    """Sum along each row: (n x k) -> (n x 1)."""
    def rule(g, out):
        out.append((a, np.broadcast_to(g, a.shape)))

    return _make(a.data.sum(axis=1, keepdims=True), (a,), "sum_rows", rule)


def sum_cols(a: Tensor) -> Tensor:
    """Sum down each column: (n x k) -> (1 x k)."""
    def rule(g, out):
        out.append((a, np.broadcast_to(g, a.shape)))

    return _make(a.data.sum(axis=0, keepdims=True), (a,), "sum_cols", rule)


def sum_all(a: Tensor) -> Tensor:
    def rule(g, out):
        out.append((a, np.full(a.shape, g[0, 0])))

    return _make(np.array([[a.data.sum()]]), (a,), "sum_all", rule)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def rule(g, out):
        out.append((a, np.full(a.shape, g[0, 0] / n)))

    return _make(np.array([[a.data.mean()]]), (a,), "mean", rule)


def _l2_normalize(a: Tensor, axis: int, op: str) -> Tensor:
    norms = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    y = a.data / safe

    def rule(g, out):
        # d(x/|x|) = (g - y <g, y>) / |x| ; zero vectors pass gradient through
        proj = (g * y).sum(axis=axis, keepdims=True)
        ga = np.where(zero, g, (g - y * proj) / safe)
        out.append((a, ga))

    out_t = _make(y, (a,), op, rule)
    if zero.any():
        out_t.warning_flag = True
        warnings.warn(f"{op}: all-zero vector left unnormalized", NormalizationWarning,
                      stacklevel=3)
    return out_t


def l2_normalize_rows(a: Tensor) -> Tensor:
    return _l2_normalize(a, 1, "l2_normalize_rows")


def l2_normalize_cols(a: Tensor) -> Tensor:
    return _l2_normalize(a, 0, "l2_normalize_cols")


def row_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    s = x.data / temperature
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=1, keepdims=True)

    def rule(g, out):
        inner = (g * p).sum(axis=1, keepdims=True)
        out.append((x, p * (g - inner) / temperature))

    return _make(p, (x,), "row_softmax", rule)


# -- indexing / structure ------------------------------------------------------

def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def rule(g, out):
        ga = np.zeros(a.shape)
        np.add.at(ga, idx, g)
        out.append((a, ga))

    return _make(a.data[idx], (a,), "take_rows", rule)


def segment_sum(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets given by ``segment_ids``."""
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape[0] != a.shape[0]:
        raise ShapeError(f"segment_sum: {seg.shape[0]} ids for {a.shape[0]} rows")
    res = np.zeros((num_segments, a.shape[1]))
    np.add.at(res, seg, a.data)

    def rule(g, out):
        out.append((a, g[seg]))

    return _make(res, (a,), "segment_sum", rule)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_lift(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def rule(g, out):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            out.append((p, g[:, lo:hi]))

    return _make(np.concatenate([p.data for p in parts], axis=1), parts, "concat_cols", rule)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_lift(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def rule(g, out):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            out.append((p, g[lo:hi]))

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, "concat_rows", rule)
