"""Dense float64 tensors with taped reverse-mode differentiation.

Tensors wrap numpy arrays and are treated as immutable once built. Ops
record themselves on the active GradTape (a thread-local stack, so
independent tapes may run on separate threads); `backward` replays the
tape in reverse to produce gradients for trainable leaves, and
`fd_check` compares those gradients against central finite differences.

Broadcasting is deliberately restricted: `add` permits a trailing-shape
bias operand, `mul` permits a size-1 scalar operand, everything else
requires exact shape agreement so that shape bugs surface at op
boundaries.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Mapping

import numpy as np


class ShapeError(ValueError):
    """Operands do not conform to an op's shape contract."""


class TapeError(RuntimeError):
    """Backward was asked about a tensor the tape never produced."""


class OracleError(RuntimeError):
    """fd_check preconditions violated (bad step or non-deterministic f)."""


_ids = itertools.count()
_local = threading.local()


def _tape_stack() -> list["GradTape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def _active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Shaped float64 array; do not mutate `.data` after construction."""

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class GradTape:
    """Ordered record of executed ops; single writer, replayable backward.

    Entries are (output id, input tensors, vjp) where vjp maps the
    upstream gradient to one gradient array per input. Use as a context
    manager; ops executed inside record themselves when any input
    requires grad.
    """

    def __init__(self):
        self._entries: list[tuple[int, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a non-active tape")
        stack.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._entries.append((out.id, inputs, vjp))
        self._produced.add(out.id)


def backward(tape: GradTape, loss: Tensor) -> dict[int, Tensor]:
    """Gradients of a scalar `loss` w.r.t. every trainable leaf on `tape`.

    Visits ops in reverse execution order exactly once; re-running on the
    same tape yields identical gradients. Returns {tensor id: gradient},
    gradients shaped like their leaves.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.id not in tape._produced:
        raise TapeError("loss tensor was not produced under this tape")

    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for out_id, inputs, vjp in reversed(tape._entries):
        g_out = grads.get(out_id)
        if g_out is None:
            continue
        for inp, g in zip(inputs, vjp(g_out)):
            if g is None or not inp.requires_grad:
                continue
            acc = grads.get(inp.id)
            grads[inp.id] = g if acc is None else acc + g

    result: dict[int, Tensor] = {}
    for _, inputs, _ in tape._entries:
        for inp in inputs:
            if inp.requires_grad and inp.id not in tape._produced and inp.id in grads:
                if inp.id not in result:
                    result[inp.id] = Tensor(grads[inp.id])
    return result


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def _needs_grad(*tensors: Tensor) -> bool:
    tape = _active_tape()
    if tape is None:
        return False
    return any(t.requires_grad for t in tensors)


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    recording = _needs_grad(*inputs)
    out = Tensor(out_data, requires_grad=recording)
    if recording:
        _active_tape()._record(out, inputs, vjp)
    return out


def _check_finite_params(op: str, **attrs) -> None:
    for k, v in attrs.items():
        if isinstance(v, (int, float)) and not np.isfinite(v):
            raise ShapeError(f"{op}: non-finite attribute {k}={v}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched on leading dims, 2-D operands broadcast in."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _sum_to_shape(ga, a.shape), _sum_to_shape(gb, b.shape)

    return _emit(out, (a, b), vjp)


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # collapse leading batch dims introduced by matmul broadcasting
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may be a trailing-shape bias broadcast over leading dims."""
    if a.shape != b.shape:
        if b.data.ndim >= a.data.ndim or a.shape[a.data.ndim - b.data.ndim:] != b.shape:
            raise ShapeError(f"add: {a.shape} + {b.shape} (only trailing bias broadcast allowed)")
    out = a.data + b.data

    def vjp(g):
        gb = g
        if b.shape != a.shape:
            gb = g.reshape((-1,) + b.shape).sum(axis=0) if b.shape else g.sum()
            gb = np.asarray(gb)
        return g, gb

    return _emit(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; `b` may be a single-element scalar tensor."""
    if a.shape != b.shape and b.data.size != 1:
        raise ShapeError(f"mul: {a.shape} * {b.shape} (only scalar second operand allowed)")
    out = a.data * b.data

    def vjp(g):
        ga = g * b.data
        if b.shape == a.shape:
            gb = g * a.data
        else:
            gb = np.asarray(np.sum(g * a.data)).reshape(b.shape)
        return ga, gb

    return _emit(out, (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def vjp(g):
        return (g * (x.data > 0.0),)

    return _emit(out, (x,), vjp)


def square(x: Tensor) -> Tensor:
    out = x.data * x.data

    def vjp(g):
        return (g * (2.0 * x.data),)

    return _emit(out, (x,), vjp)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0.0):
        raise ShapeError("sqrt: negative entries")
    out = np.sqrt(x.data)

    def vjp(g):
        return (g * (0.5 / out),)

    return _emit(out, (x,), vjp)


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    `mask` (an attribute, not a taped input) is broadcastable to x.shape
    with entries in {0,1}; masked positions receive exactly zero weight
    and the normalization runs over unmasked positions only. Each slice
    must keep at least one unmasked position.
    """
    if mask is None:
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=np.float64), x.shape)
        if not np.all(m.max(axis=-1) > 0.0):
            raise ShapeError("softmax_lastdim: a slice has every position masked")
        neg = np.where(m > 0.0, x.data, -np.inf)
        shifted = x.data - neg.max(axis=-1, keepdims=True)
        e = np.exp(shifted) * m
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _emit(out, (x,), vjp)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine scale+shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gg = gain.data * g
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.data.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(out, (x, gain, bias), vjp)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: output shape ids.shape + (width,). `ids` is an attribute."""
    idx = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    out = table.data[idx]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit(out, (table,), vjp)


def dropout_mask_apply(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a precomputed keep mask (drawn outside the taped graph)."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape:
        raise ShapeError(f"dropout_mask_apply: mask {m.shape} vs x {x.shape}")
    out = x.data * m

    def vjp(g):
        return (g * m,)

    return _emit(out, (x,), vjp)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeError("mean of empty tensor")
    out = np.asarray(x.data.mean())

    def vjp(g):
        return (np.full_like(x.data, float(g) / n),)

    return _emit(out, (x,), vjp)


def reduce_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def vjp(g):
        return (np.full_like(x.data, float(g)),)

    return _emit(out, (x,), vjp)


def transpose_last2(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError(f"transpose_last2 needs >=2-D, got {x.shape}")
    out = np.swapaxes(x.data, -1, -2).copy()

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _emit(out, (x,), vjp)


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = tuple(tensors)
    if not ts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(out, ts, vjp)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    n = x.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of size {n}")
    sel = [slice(None)] * x.data.ndim
    sel[axis] = slice(start, stop)
    sel = tuple(sel)
    out = x.data[sel].copy()

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[sel] = g
        return (gx,)

    return _emit(out, (x,), vjp)


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "softmax_lastdim": softmax_lastdim,
    "layernorm": layernorm,
    "embedding_lookup": embedding_lookup,
    "dropout_mask_apply": dropout_mask_apply,
    "mean": mean,
    "sum": reduce_sum,
    "square": square,
    "sqrt": sqrt,
    "transpose_last2": transpose_last2,
    "concat": concat,
    "slice": slice_axis,
}


def forward_op(op_kind: str, inputs, **attrs) -> Tensor:
    """Dispatch a primitive by name; appended to the active tape when recording."""
    fn = _OPS.get(op_kind)
    if fn is None:
        raise ShapeError(f"unknown op kind {op_kind!r}; valid: {sorted(_OPS)}")
    if op_kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


def scalar(value: float) -> Tensor:
    """Constant scalar tensor (not trainable)."""
    return Tensor(np.asarray(float(value)))


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def fd_check(f: Callable[[Mapping[str, Tensor]], Tensor],
             params: Mapping[str, Tensor],
             step: float) -> float:
    """Max relative disagreement between f's taped gradient and central differences.

    f must be deterministic (dropout disabled); it is evaluated once under
    a tape for analytic gradients, then twice per parameter entry without
    a tape. Error metric per entry: |analytic - fd| / max(1, |analytic|).
    """
    if step <= 0.0:
        raise OracleError(f"fd step must be positive, got {step}")

    base = float(f(params).item())
    again = float(f(params).item())
    if base != again:
        raise OracleError("f is not deterministic: two evaluations differ")

    tape = GradTape()
    with tape:
        loss = f(params)
    analytic = backward(tape, loss)

    worst = 0.0
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = analytic.get(p.id)
        ga = np.zeros_like(p.data) if g is None else g.data
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(params).item())
            flat[i] = orig - step
            lo = float(f(params).item())
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]))
            if err > worst:
                worst = err
    return worst
