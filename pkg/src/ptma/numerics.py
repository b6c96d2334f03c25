"""Dense tensors with a reverse-mode tape, plus a central-difference gradient checker.

Every op records a node on a thread-local tape when any input requires a
gradient. ``backward`` walks the tape in reverse, accumulating gradients with
``+`` over fan-out, and clears the tape afterwards.
"""

from __future__ import annotations

import contextlib
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

# Additive mask value. A true -inf would give NaN from (-inf) - (-inf) in the max shift.
MASK_VALUE = -1e30

_DEBUG = os.environ.get("PTMA_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _lift(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


@dataclass
class TapeNode:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class _TapeState(threading.local):
    nodes: list = field(default_factory=list)
    enabled: bool = True


_tape = _TapeState()


def tape_nodes() -> list[TapeNode]:
    return _tape.nodes


def clear_tape() -> None:
    _tape.nodes = []


@contextlib.contextmanager
def no_grad():
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


def _record(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(out_data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{kind}: non-finite output from finite inputs")
    needs = _tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _tape.nodes.append(TapeNode(kind, inputs, out, backward))
    return out


# ---------------------------------------------------------------- broadcasting

def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    """Leading-1 broadcasting only: the smaller operand may differ from the larger
    only in leading axes, which must be 1 (or absent)."""
    if a == b:
        return a
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if len(a) == len(b) and np.prod(a, dtype=np.int64) < np.prod(b, dtype=np.int64):
        big, small = b, a
    padded = (1,) * (len(big) - len(small)) + tuple(small)
    k = 0
    while k < len(big) and padded[k] == 1 and padded[k:] != tuple(big[k:]):
        k += 1
    if tuple(padded[k:]) != tuple(big[k:]):
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}")
    return tuple(big)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ------------------------------------------------------------------- op catalog

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1 - y * y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record("relu", (x,), np.where(pos, x.data, 0).astype(x.dtype), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record("exp", (x,), y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record("log", (x,), np.log(xd), lambda g: (g / xd,))


def _softmax_data(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis after adding a constant additive ``mask``."""
    z = x.data
    if mask is not None:
        mask = np.asarray(mask)
        _broadcast_shape("softmax", x.shape, mask.shape)
        z = z + mask.astype(z.dtype)
    y = _softmax_data(z)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), y, back)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _record("log_softmax", (x,), y, lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat: no inputs")
    ref = xs[0].shape
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in xs]} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _record("concat", xs, np.concatenate([t.data for t in xs], axis=axis),
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def slice_(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    n = x.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice: range [{start}, {stop}) out of bounds for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _record("slice", (x,), x.data[idx], back)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (x,), np.asarray(x.data.sum(axis=axis)), back)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record("mean", (x,), np.asarray(x.data.mean(axis=axis)), back)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    return _record("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


FORWARD_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "slice": slice_,
    "sum": sum_,
    "mean": mean,
    "transpose": transpose,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = FORWARD_OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------- backward

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Returns a mapping from every leaf tensor that requires a gradient (and was
    reached) to its gradient; the same array is stored on ``leaf.grad``.
    """
    if loss.data.size != 1:
        clear_tape()
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    nodes = _tape.nodes
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(nodes):
        produced.add(id(node.output))
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            leaves.setdefault(key, inp)
    clear_tape()
    out: dict[Tensor, np.ndarray] = {}
    for key, t in leaves.items():
        if key in produced or key not in grads:
            continue
        g = np.asarray(grads[key], dtype=t.dtype).reshape(t.shape)
        t.grad = g
        out[t] = g
    if not nodes and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        out[loss] = loss.grad
    return out


backward_pass = backward


# ----------------------------------------------------------------- grad check

@dataclass
class GradCheckEntry:
    name: str
    shape: tuple[int, ...]
    max_rel_error: float
    max_abs_error: float
    passed: bool
    nonfinite: bool = False


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float
    eps: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def format(self) -> str:
        lines = [f"{'parameter':<20} {'shape':<12} {'max rel err':>12}  status"]
        for e in self.entries:
            status = "ok" if e.passed else ("NONFINITE" if e.nonfinite else "FAIL")
            lines.append(f"{e.name:<20} {str(e.shape):<12} {e.max_rel_error:>12.3e}  {status}")
        lines.append(f"tol={self.tol:g} eps={self.eps:g} -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def grad_check(
    f: Callable[..., Tensor],
    params: Sequence[np.ndarray | Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-8,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f(*params)`` with central differences.

    Runs in double precision. Relative error per element is
    ``|a - n| / max(|a|, |n|, floor / tol)``: the usual relative error, except
    that an absolute error below ``floor`` never counts as a failure (entries
    whose true gradient is zero see only round-off in the finite difference).
    A tensor passes when its maximum is below ``tol`` and every perturbed loss
    was finite.
    """
    base = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in params]
    names = list(names) if names is not None else [f"p{i}" for i in range(len(base))]

    clear_tape()
    leaves = [Tensor(b.copy(), requires_grad=True) for b in base]
    loss = f(*leaves)
    grads = backward(loss)
    analytic = [grads.get(t, np.zeros_like(t.data)) for t in leaves]

    def evaluate(arrs) -> float:
        with no_grad():
            return float(f(*[Tensor(a) for a in arrs]).data)

    entries = []
    for k, (name, b) in enumerate(zip(names, base)):
        numeric = np.zeros_like(b)
        nonfinite = False
        for idx in np.ndindex(b.shape):
            work = [x if j != k else x.copy() for j, x in enumerate(base)]
            work[k][idx] = b[idx] + eps
            fp = evaluate(work)
            work[k][idx] = b[idx] - eps
            fm = evaluate(work)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                nonfinite = True
                numeric[idx] = np.nan
                continue
            numeric[idx] = (fp - fm) / (2 * eps)
        a = analytic[k]
        diff = np.abs(a - numeric)
        rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor / tol)
        finite = np.isfinite(rel)
        max_rel = float(rel[finite].max()) if finite.any() else (float("nan") if rel.size else 0.0)
        max_abs = float(diff[finite].max()) if finite.any() else (float("nan") if diff.size else 0.0)
        ok = (not nonfinite) and max_rel < tol
        entries.append(GradCheckEntry(name, tuple(b.shape), max_rel, max_abs, ok, nonfinite))
    return GradCheckReport(entries, tol, eps)
