"""Float32 tensors with a small reverse-mode tape.

Tensors are immutable wrappers around C-contiguous float32 arrays. An op
records itself on the active :class:`Tape` only when one of its inputs
descends from a trainable leaf of that tape, so frozen computation costs
nothing extra and never allocates gradient storage.

Broadcasting in binary ops is limited to operands of equal rank whose
extents match or are 1. Reductions (means, variances, L2 norms, loss means)
accumulate in float64 and round once to float32.
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .errors import ChannelIndexError, ContractError, DimensionError, NonFiniteError

LAYERNORM_EPS = 1e-6
GELU_C = math.sqrt(2.0 / math.pi)  # tanh-approximation constants
GELU_A = 0.044715

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("sct_tape", default=None)


class Tensor:
    __slots__ = ("_data", "_tape", "_slot")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float32, order="C", copy=True)
        arr.flags.writeable = False
        self._data = arr
        self._tape = None
        self._slot = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # takes ownership; caller must not mutate arr afterwards
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray) or arr.dtype != np.float32 or not arr.flags.c_contiguous:
            arr = np.array(arr, dtype=np.float32, order="C")
        arr.flags.writeable = False
        t._data = arr
        t._tape = None
        t._slot = -1
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    @property
    def tracked(self) -> bool:
        return self._tape is not None

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, tracked={self.tracked})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=np.float32))


def ones(shape) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=np.float32))


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of primitive applications on trainable descendants.

    Use as a context manager; create trainable leaves with :meth:`leaf`.
    """

    def __init__(self):
        self._nodes: list[tuple[int, tuple[int, ...], Callable]] = []
        self._leaves: dict[str, int] = {}
        self._shapes: dict[int, tuple[int, ...]] = {}
        self._next_slot = 0
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def _new_slot(self, shape) -> int:
        slot = self._next_slot
        self._next_slot += 1
        self._shapes[slot] = tuple(shape)
        return slot

    def leaf(self, name: str, value) -> Tensor:
        if name in self._leaves:
            raise ContractError(f"leaf {name!r} already registered on this tape")
        t = Tensor(value.data if isinstance(value, Tensor) else value)
        t._tape = self
        t._slot = self._new_slot(t.shape)
        self._leaves[name] = t._slot
        return t

    @property
    def leaf_names(self) -> list[str]:
        return list(self._leaves)

    def __len__(self):
        return len(self._nodes)


def current_tape() -> Tape | None:
    return _active_tape.get()


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum implies finite elements; fall back to the elementwise test
    # only when the cheap test fails (overflowing sums of finite values)
    with np.errstate(over="ignore", invalid="ignore"):
        total = arr.sum()
    if not math.isfinite(total) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _record(op: str, out: np.ndarray, parents: Sequence[Tensor], vjp: Callable, check: bool = True) -> Tensor:
    """Wrap ``out`` and, when any parent is tracked, push a node onto the tape.

    ``vjp(g, needs)`` returns one gradient array (or None) per parent; entries
    for parents with ``needs[i] == False`` are never used and may be None.
    """
    if check:
        _check_finite(out, op)
    result = Tensor._wrap(out)
    tape = _active_tape.get()
    if tape is None:
        return result
    slots = tuple(p._slot if p._tape is tape else -1 for p in parents)
    if all(s < 0 for s in slots):
        return result
    result._tape = tape
    result._slot = tape._new_slot(result.shape)
    tape._nodes.append((result._slot, slots, vjp))
    return result


def grad_of(loss: Tensor, tape: Tape | None = None) -> dict[str, Tensor]:
    """Gradient of a scalar loss with respect to every trainable leaf of ``tape``.

    Leaves the loss does not depend on get zero gradients; frozen tensors
    never appear in the result.
    """
    if tape is None:
        tape = loss._tape if loss._tape is not None else current_tape()
    if tape is None:
        raise ContractError("grad_of needs the tape the loss was recorded on")
    if loss.shape != ():
        raise ContractError(f"loss must be a scalar (shape ()), got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss._tape is tape:
        grads[loss._slot] = np.ones((), dtype=np.float32)
        for out_slot, slots, vjp in reversed(tape._nodes):
            g = grads.pop(out_slot, None)
            if g is None:
                continue
            needs = tuple(s >= 0 for s in slots)
            parts = vjp(g, needs)
            for slot, part in zip(slots, parts):
                if slot < 0 or part is None:
                    continue
                prev = grads.get(slot)
                grads[slot] = part if prev is None else prev + part
    result = {}
    for name, slot in tape._leaves.items():
        g = grads.get(slot)
        if g is None:
            g = np.zeros(tape._shapes[slot], dtype=np.float32)
        result[name] = Tensor._wrap(np.asarray(g, dtype=np.float32).reshape(tape._shapes[slot]))
    return result


# ---------------------------------------------------------------------------
# shape helpers


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if len(a) != len(b):
        raise DimensionError(f"{op}: rank mismatch {list(a)} vs {list(b)} (no implicit rank promotion)")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise DimensionError(f"{op}: shapes {list(a)} and {list(b)} are not broadcastable")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    _broadcast_shape(sa, sb, "add")

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)

    return _record("add", a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    _broadcast_shape(sa, sb, "sub")

    def vjp(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(-g, sb) if needs[1] else None)

    return _record("sub", a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (
            _unbroadcast(g * bd, ad.shape) if needs[0] else None,
            _unbroadcast(g * ad, bd.shape) if needs[1] else None,
        )

    return _record("mul", ad * bd, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s32 = np.float32(s)

    def vjp(g, needs):
        return (g * s32,)

    return _record("scale", a.data * s32, (a,), vjp)


@njit(cache=True)
def _gelu_vjp(x, th, g, c, a3, out):
    # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2), fused in one pass
    xf, tf, gf, of = x.ravel(), th.ravel(), g.ravel(), out.ravel()
    half, one = np.float32(0.5), np.float32(1.0)
    for i in range(xf.size):
        xi, t = xf[i], tf[i]
        of[i] = gf[i] * (half * (one + t) + half * xi * (one - t * t) * c * (one + a3 * xi * xi))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + a x^3))), c = sqrt(2/pi), a = 0.044715."""
    xd = x.data
    c, a = np.float32(GELU_C), np.float32(GELU_A)
    th = xd * xd
    th *= a
    th += 1.0
    th *= xd
    th *= c
    np.tanh(th, out=th)
    out = th + 1.0
    out *= xd
    out *= 0.5

    def vjp(g, needs):
        d = np.empty_like(xd)
        _gelu_vjp(xd, th, np.ascontiguousarray(g, dtype=np.float32), c, np.float32(3.0 * GELU_A), d)
        return (d,)

    return _record("gelu", out, (x,), vjp)


# ---------------------------------------------------------------------------
# contraction


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes of equal-rank operands."""
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2 or len(sa) != len(sb) or sa[-1] != sb[-2]:
        raise DimensionError(f"matmul: cannot contract shapes {list(sa)} and {list(sb)}")
    _broadcast_shape(sa[:-2], sb[:-2], "matmul")
    ad, bd = a.data, b.data
    p, q, r = sa[-2], sa[-1], sb[-1]
    # weight-style right operand: one large GEMM instead of a batched loop
    shared_b = all(x == 1 for x in sb[:-2]) and len(sa) > 2
    if shared_b:
        b2 = bd.reshape(q, r)
        out = (ad.reshape(-1, q) @ b2).reshape(sa[:-2] + (p, r))
    else:
        out = np.matmul(ad, bd)

    def vjp(g, needs):
        ga = gb = None
        if shared_b:
            g2 = g.reshape(-1, r)
            if needs[0]:
                ga = (g2 @ b2.T).reshape(sa)
            if needs[1]:
                gb = (ad.reshape(-1, q).T @ g2).reshape(sb)
            return ga, gb
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), sa)
        if needs[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), sb)
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# normalisation


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``.

    Mean and variance accumulate in float64 and are rounded once to float32.
    """
    d = x.shape[-1]
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layernorm: input {list(x.shape)} needs gamma/beta of shape [{d}], "
            f"got {list(gamma.shape)} and {list(beta.shape)}"
        )
    if eps <= 0:
        raise ContractError(f"layernorm eps must be positive, got {eps}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
    xhat = xd - mu
    var = np.square(xhat).mean(axis=-1, keepdims=True, dtype=np.float64)
    rstd = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    xhat *= rstd
    gd, bd = gamma.data, beta.data
    out = xhat * gd
    out += bd

    def vjp(g, needs):
        gx = gg = gbeta = None
        if needs[0]:
            dxhat = g * gd
            m1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
            gx = dxhat - m1
            gx -= xhat * m2
            gx *= rstd
        if needs[1]:
            gg = (g * xhat).reshape(-1, d).sum(axis=0, dtype=np.float64).astype(np.float32)
        if needs[2]:
            gbeta = g.reshape(-1, d).sum(axis=0, dtype=np.float64).astype(np.float32)
        return gx, gg, gbeta

    return _record("layernorm", out, (x, gamma, beta), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    out = xd - xd.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True, dtype=np.float64).astype(np.float32)

    def vjp(g, needs):
        dot = (g * out).sum(axis=axis, keepdims=True, dtype=np.float64).astype(np.float32)
        gx = g - dot
        gx *= out
        return (gx,)

    return _record("softmax", out, (x,), vjp)


# ---------------------------------------------------------------------------
# channel routing


def validate_indices(idx, width: int, layer: int | None = None) -> np.ndarray:
    """Check a channel index list is sorted, unique and below ``width``."""
    arr = np.asarray(idx, dtype=np.int64).reshape(-1)
    where = f" at layer {layer}" if layer is not None else ""
    if arr.size:
        bad = arr[(arr < 0) | (arr >= width)]
        if bad.size:
            raise ChannelIndexError(f"channel index {int(bad[0])} out of range [0, {width}){where}")
        if np.any(np.diff(arr) <= 0):
            raise ChannelIndexError(f"channel indices{where} must be sorted ascending without duplicates")
    return arr


def gather_channels(x: Tensor, idx, layer: int | None = None) -> Tensor:
    """Select channels ``idx`` from the last axis."""
    sx = x.shape
    arr = validate_indices(idx, sx[-1], layer)
    out = np.ascontiguousarray(x.data[..., arr])

    def vjp(g, needs):
        full = np.zeros(sx, dtype=np.float32)
        full[..., arr] = g
        return (full,)

    return _record("gather_channels", out, (x,), vjp, check=False)


def scatter_channels(values: Tensor, idx, into: Tensor, layer: int | None = None) -> Tensor:
    """Copy of ``into`` with channels ``idx`` replaced by ``values``."""
    arr = validate_indices(idx, into.shape[-1], layer)
    if values.shape != into.shape[:-1] + (arr.size,):
        raise DimensionError(
            f"scatter_channels: values {list(values.shape)} do not fit {arr.size} channels of {list(into.shape)}"
        )
    out = into.data.copy()
    out[..., arr] = values.data

    def vjp(g, needs):
        gv = np.ascontiguousarray(g[..., arr]) if needs[0] else None
        gi = None
        if needs[1]:
            gi = g.copy()
            gi[..., arr] = 0.0
        return gv, gi

    return _record("scatter_channels", out, (values, into), vjp, check=False)


def reduce_l2_over_all_but_channel(x: Tensor) -> Tensor:
    """L2 norm of each last-axis channel over every other axis, accumulated in float64."""
    if x.ndim < 1:
        raise DimensionError("reduce_l2_over_all_but_channel needs rank >= 1")
    d = x.shape[-1]
    flat = x.data.reshape(-1, d).astype(np.float64)
    norm64 = np.sqrt(np.einsum("ij,ij->j", flat, flat))
    out = norm64.astype(np.float32)

    def vjp(g, needs):
        safe = np.where(norm64 > 0, norm64, 1.0)
        coef = np.where(norm64 > 0, g.astype(np.float64) / safe, 0.0)
        return ((flat * coef).astype(np.float32).reshape(x.shape),)

    return _record("reduce_l2", out, (x,), vjp)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    sx = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {list(sx)} to {list(shape)}") from exc

    def vjp(g, needs):
        return (g.reshape(sx),)

    return _record("reshape", out, (x,), vjp, check=False)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {list(axes)} is not a permutation of rank {x.ndim}")
    inv = tuple(np.argsort(axes))

    def vjp(g, needs):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _record("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), vjp, check=False)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """``x[index]`` along one axis; an int drops the axis, a slice keeps it."""
    axis = axis % x.ndim
    sx = x.shape
    key = (slice(None),) * axis + (index,)
    try:
        out = np.ascontiguousarray(x.data[key])
    except IndexError as exc:
        raise DimensionError(f"take: index {index!r} invalid for axis {axis} of {list(sx)}") from exc

    def vjp(g, needs):
        full = np.zeros(sx, dtype=np.float32)
        full[key] = g
        return (full,)

    return _record("take", out, (x,), vjp, check=False)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[list(t.shape) for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g, needs):
        parts = []
        for i, need in enumerate(needs):
            if not need:
                parts.append(None)
                continue
            key = (slice(None),) * axis + (slice(int(bounds[i]), int(bounds[i + 1])),)
            parts.append(np.ascontiguousarray(g[key]))
        return tuple(parts)

    return _record("concat", out, tensors, vjp, check=False)


# ---------------------------------------------------------------------------
# reductions and loss


def sum_all(x: Tensor) -> Tensor:
    sx = x.shape

    def vjp(g, needs):
        return (np.full(sx, g, dtype=np.float32),)

    return _record("sum", np.asarray(x.data.sum(dtype=np.float64), dtype=np.float32), (x,), vjp)


def mean_all(x: Tensor) -> Tensor:
    sx, n = x.shape, max(x.size, 1)

    def vjp(g, needs):
        return (np.full(sx, g / n, dtype=np.float32),)

    return _record("mean", np.asarray(x.data.mean(dtype=np.float64), dtype=np.float32), (x,), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` [B, M] against integer labels."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, M] logits, got {list(logits.shape)}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, m = logits.shape
    if y.size != b:
        raise DimensionError(f"cross_entropy: {y.size} labels for {b} rows")
    if y.size and (y.min() < 0 or y.max() >= m):
        raise ChannelIndexError(f"label out of range [0, {m})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = (lse - z[rows, y]).mean()
    probs = np.exp(z - lse[:, None])

    def vjp(g, needs):
        d = probs.copy()
        d[rows, y] -= 1.0
        return ((d * (float(g) / b)).astype(np.float32),)

    return _record("cross_entropy", np.asarray(loss, dtype=np.float32), (logits,), vjp)


# ---------------------------------------------------------------------------
# composites


def _dense(op: str, x: Tensor, w: np.ndarray, b: np.ndarray | None, parents, pack: bool) -> Tensor:
    sx = x.shape
    n_in, n_out = w.shape
    x2 = x.data.reshape(-1, n_in)
    out = x2 @ w
    if b is not None:
        out += b
    out = out.reshape(sx[:-1] + (n_out,))

    def vjp(g, needs):
        g2 = g.reshape(-1, n_out)
        gx = (g2 @ w.T).reshape(sx) if needs[0] else None
        gw = gb = None
        if any(needs[1:]):
            gw = x2.T @ g2
            gb = g2.sum(axis=0, dtype=np.float64).astype(np.float32) if b is not None else None
        if pack:
            return gx, (np.concatenate([gw, gb[None, :]], axis=0) if needs[1] else None)
        return (gx, gw, gb)[: len(needs)]

    return _record(op, out, parents, vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight [in, out], bias [out]."""
    if x.ndim < 1 or weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: cannot apply weight {list(weight.shape)} to input {list(x.shape)}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {list(bias.shape)} does not match weight {list(weight.shape)}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    return _dense("linear", x, weight.data, None if bias is None else bias.data, parents, pack=False)


def affine_packed(x: Tensor, packed: Tensor) -> Tensor:
    """Linear layer whose bias is stored as the last row of ``packed`` [in+1, out]."""
    if packed.ndim != 2 or x.shape[-1] != packed.shape[0] - 1:
        raise DimensionError(f"linear: input width {x.shape[-1]} does not match packed weight {list(packed.shape)}")
    pd = packed.data
    return _dense("affine", x, pd[:-1], pd[-1], (x, packed), pack=True)
