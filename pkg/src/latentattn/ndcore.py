"""Dense array micro-engine used by every attention pipeline in this package.

Arrays are numpy-backed, float64 by default (float32 is selectable globally
for the latency harness). Every primitive is a pure function that optionally
records itself on an active :class:`Tape` for reverse-mode gradients, and
reports multiply-add counts to an active :class:`FlopCounter`. The engine
deliberately stays small: it provides exactly the primitives the attention
variants need, nothing more.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GroupMismatch, NotScalarRoot, ShapeMismatch

_DEFAULT_DTYPE = np.float64
_NODE_IDS = itertools.count()

_tape_local = threading.local()
_flop_local = threading.local()


def set_default_dtype(dtype) -> None:
    """Set the global element type for newly created arrays.

    Only float64 and float32 are supported. Gradient and equivalence
    tolerances assume float64; float32 exists for the latency harness.
    """
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class NdArray:
    """Dense multi-dimensional float array.

    Immutable from the caller's perspective: operations return new arrays.
    ``requires_grad`` marks leaves whose gradients :func:`grad` should track.
    """

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_NODE_IDS)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "NdArray":
        return NdArray(self.data.copy(), self.requires_grad)

    def __repr__(self) -> str:
        return f"NdArray(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small operator surface; everything routes through the taped primitives.
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        raise TypeError("division only by python scalars")

    def __neg__(self):
        return mul(self, -1.0)


def as_array(x, requires_grad: bool = False) -> NdArray:
    if isinstance(x, NdArray):
        return x
    return NdArray(x, requires_grad)


def zeros(shape, requires_grad: bool = False) -> NdArray:
    return NdArray(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad)


def ones(shape, requires_grad: bool = False) -> NdArray:
    return NdArray(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad)


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager around the forward; call :func:`grad` (or
    :meth:`gradients`) afterwards. Tapes are single-use and must not be
    shared across threads.
    """

    def __init__(self):
        self._records: list[tuple[int, list[tuple[int, Callable]]]] = []
        self._watched: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_tape_local, "stack", None)
        if stack is None:
            stack = _tape_local.stack = []
        if stack:
            raise RuntimeError("a Tape is already active on this thread")
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_local.stack.pop()
        return False

    def gradients(self, loss: NdArray, params: Sequence[NdArray]) -> list[NdArray]:
        return grad(self, loss, params)


def _active_tape() -> Tape | None:
    stack = getattr(_tape_local, "stack", None)
    return stack[-1] if stack else None


def _record(out: NdArray, pairs: Iterable[tuple[NdArray, Callable]]) -> None:
    """Register ``out`` on the active tape if any input is grad-connected."""
    tape = _active_tape()
    if tape is None:
        return
    live = [
        (x.node_id, vjp)
        for x, vjp in pairs
        if x.requires_grad or x.node_id in tape._watched
    ]
    if live:
        tape._records.append((out.node_id, live))
        tape._watched.add(out.node_id)


def grad(tape: Tape, loss_root: NdArray, params: Sequence[NdArray]) -> list[NdArray]:
    """Adjoints of a scalar loss w.r.t. ``params``, replayed off the tape.

    Parameters never touched by the recorded computation get zero
    gradients (disconnected, not an error).
    """
    if loss_root.shape != ():
        raise NotScalarRoot(f"loss root has shape {loss_root.shape}, expected scalar")
    adjoint: dict[int, np.ndarray] = {
        loss_root.node_id: np.ones((), dtype=loss_root.data.dtype)
    }
    for out_id, pairs in reversed(tape._records):
        g = adjoint.pop(out_id, None)
        if g is None:
            continue
        for in_id, vjp in pairs:
            contrib = vjp(g)
            prev = adjoint.get(in_id)
            adjoint[in_id] = contrib if prev is None else prev + contrib
    out = []
    for p in params:
        g = adjoint.get(p.node_id)
        out.append(NdArray(np.zeros_like(p.data) if g is None else g))
    return out


def finite_diff(lossfn: Callable[[NdArray], float], param: NdArray, step: float) -> NdArray:
    """Central-difference gradient oracle, entry by entry.

    ``lossfn`` must recompute the loss from the parameter's current
    contents each call; entries are perturbed in place and restored.
    """
    base = param.data
    g = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        lp = float(lossfn(param))
        flat[i] = orig - step
        lm = float(lossfn(param))
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * step)
    return NdArray(g)


# ---------------------------------------------------------------------------
# FLOP accounting


class FlopCounter:
    """Counts multiply-add work (2 FLOPs per MAC) by scope.

    Matmul and convolution FLOPs accumulate in ``by_scope`` (convolutions
    always under the ``"conv"`` key); elementwise work (softmax, norms,
    rotations, adds) is tallied separately in ``elementwise`` and excluded
    from :attr:`total`.
    """

    def __init__(self):
        self.by_scope: dict[str, int] = {}
        self.elementwise: int = 0
        self._scope_stack: list[str] = ["default"]

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def __enter__(self) -> "FlopCounter":
        stack = getattr(_flop_local, "stack", None)
        if stack is None:
            stack = _flop_local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _flop_local.stack.pop()
        return False

    def _add(self, flops: int, scope: str | None = None) -> None:
        key = scope if scope is not None else self._scope_stack[-1]
        self.by_scope[key] = self.by_scope.get(key, 0) + int(flops)

    def scope(self, name: str):
        return _ScopeGuard(self, name)


class _ScopeGuard:
    def __init__(self, counter: FlopCounter, name: str):
        self._counter = counter
        self._name = name

    def __enter__(self):
        self._counter._scope_stack.append(self._name)

    def __exit__(self, exc_type, exc, tb):
        self._counter._scope_stack.pop()
        return False


class flop_scope:
    """Label matmul FLOPs inside this block on the active counter (if any)."""

    def __init__(self, name: str):
        self._name = name
        self._guard = None

    def __enter__(self):
        fc = _active_counter()
        if fc is not None:
            self._guard = fc.scope(self._name)
            self._guard.__enter__()
        return self

    def __exit__(self, exc_type, exc, tb):
        if self._guard is not None:
            self._guard.__exit__(exc_type, exc, tb)
        return False


def _active_counter() -> FlopCounter | None:
    stack = getattr(_flop_local, "stack", None)
    return stack[-1] if stack else None


def _count_matmul(out_shape: tuple, k: int) -> None:
    fc = _active_counter()
    if fc is not None:
        fc._add(2 * int(np.prod(out_shape, dtype=np.int64)) * k)


def _count_conv(out_elems: int, macs_per_elem: int) -> None:
    fc = _active_counter()
    if fc is not None:
        fc._add(2 * out_elems * macs_per_elem, scope="conv")


def _count_elementwise(n: int) -> None:
    fc = _active_counter()
    if fc is not None:
        fc.elementwise += int(n)


def instrument_flops(run: Callable[[], object]) -> int:
    """Total matmul+conv FLOPs (2 per multiply-add) of running ``run``."""
    with FlopCounter() as fc:
        run()
    return fc.total


def count_flops(run: Callable[[], object]) -> FlopCounter:
    """Like :func:`instrument_flops` but returns the per-scope breakdown."""
    with FlopCounter() as fc:
        run()
    return fc


# ---------------------------------------------------------------------------
# Primitives


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def matmul(a, b) -> NdArray:
    """Batched matrix product; leading dims broadcast, last two contract."""
    a = as_array(a)
    b = as_array(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner extents differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)
    _count_matmul(out_data.shape, a.shape[-1])
    out = NdArray(out_data)

    def vjp_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)

    def vjp_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)

    _record(out, [(a, vjp_a), (b, vjp_b)])
    return out


def _elementwise_binary(a, b, fwd, vjp_a, vjp_b) -> NdArray:
    a = as_array(a)
    b = as_array(b)
    out = NdArray(fwd(a.data, b.data))
    _count_elementwise(out.size)
    _record(out, [
        (a, lambda g: _unbroadcast(vjp_a(g), a.shape)),
        (b, lambda g: _unbroadcast(vjp_b(g), b.shape)),
    ])
    return out


def add(a, b) -> NdArray:
    return _elementwise_binary(a, b, np.add, lambda g: g, lambda g: g)


def sub(a, b) -> NdArray:
    return _elementwise_binary(a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a, b) -> NdArray:
    a = as_array(a)
    b = as_array(b)
    return _elementwise_binary(
        a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data
    )


def exp(a) -> NdArray:
    a = as_array(a)
    out = NdArray(np.exp(a.data))
    _count_elementwise(out.size)
    _record(out, [(a, lambda g: g * out.data)])
    return out


def sum_all(a) -> NdArray:
    """Reduce to a rank-0 scalar (the usual loss root)."""
    a = as_array(a)
    out = NdArray(a.data.sum())
    _count_elementwise(a.size)
    _record(out, [(a, lambda g: np.broadcast_to(g, a.shape).astype(a.data.dtype))])
    return out


def reshape(a, shape) -> NdArray:
    a = as_array(a)
    out = NdArray(a.data.reshape(shape))
    _record(out, [(a, lambda g: g.reshape(a.shape))])
    return out


def transpose(a, axes) -> NdArray:
    a = as_array(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = NdArray(a.data.transpose(axes))
    _record(out, [(a, lambda g: g.transpose(inv))])
    return out


def concat(arrays: Sequence, axis: int) -> NdArray:
    arrays = [as_array(x) for x in arrays]
    out = NdArray(np.concatenate([x.data for x in arrays], axis=axis))
    offsets = np.cumsum([0] + [x.shape[axis] for x in arrays])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    _record(out, [(x, make_vjp(i)) for i, x in enumerate(arrays)])
    return out


def slice_axis(a, axis: int, start: int, stop: int) -> NdArray:
    a = as_array(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = NdArray(a.data[index])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return full

    _record(out, [(a, vjp)])
    return out


def softmax_rows(x, scale: float = 1.0) -> NdArray:
    """Row-stabilized softmax over the last axis of ``scale * x``.

    Rows are shifted by their max before exponentiation. ``-inf`` entries
    (mask fill) get exactly zero weight; each row must keep at least one
    finite entry.
    """
    x = as_array(x)
    if x.shape[-1] < 1:
        raise ShapeMismatch("softmax needs at least one column")
    z = scale * x.data
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    _count_elementwise(5 * x.size)
    out = NdArray(y)

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return scale * y * (g - inner)

    _record(out, [(x, vjp)])
    return out


def l2_normalize_heads(x, eps: float = 1e-6) -> NdArray:
    """Normalize the last axis to unit L2 norm, guarding short vectors.

    The divisor is ``max(||x||, eps)`` so the zero vector maps to itself.
    """
    x = as_array(x)
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    n = np.maximum(norm, eps)
    y = x.data / n
    _count_elementwise(3 * x.size)
    out = NdArray(y)

    def vjp(g):
        live = (norm > eps).astype(x.data.dtype)
        inner = (g * x.data).sum(axis=-1, keepdims=True)
        return g / n - live * x.data * inner / (n ** 3)

    _record(out, [(x, vjp)])
    return out


def rotate_pairs(x, cos: np.ndarray, sin: np.ndarray) -> NdArray:
    """Rotate interleaved channel pairs of the last axis by given angles.

    ``cos``/``sin`` must broadcast against the pair view ``x[..., :2m]``
    reshaped to ``(..., m)``; channels beyond ``2m`` pass through. The map
    is orthogonal, so norms are preserved exactly.
    """
    x = as_array(x)
    m = cos.shape[-1]
    span = 2 * m
    if span > x.shape[-1]:
        raise ShapeMismatch(f"rotation span {span} exceeds channel dim {x.shape[-1]}")
    xe = x.data[..., 0:span:2]
    xo = x.data[..., 1:span:2]
    out_data = x.data.copy()
    out_data[..., 0:span:2] = xe * cos - xo * sin
    out_data[..., 1:span:2] = xe * sin + xo * cos
    _count_elementwise(3 * span * (x.size // max(x.shape[-1], 1)))
    out = NdArray(out_data)

    def vjp(g):
        ge = g[..., 0:span:2]
        go = g[..., 1:span:2]
        gx = g.copy()
        gx[..., 0:span:2] = ge * cos + go * sin
        gx[..., 1:span:2] = -ge * sin + go * cos
        return gx

    _record(out, [(x, vjp)])
    return out


def shift_seq(x) -> NdArray:
    """Shift one step along axis 0 (time), zero-filling position 0."""
    x = as_array(x)
    out_data = np.zeros_like(x.data)
    out_data[1:] = x.data[:-1]
    out = NdArray(out_data)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[:-1] = g[1:]
        return gx

    _record(out, [(x, vjp)])
    return out


def repeat_heads(x, repeats: int, axis: int) -> NdArray:
    """Tile each index along ``axis`` into ``repeats`` consecutive copies."""
    x = as_array(x)
    out = NdArray(np.repeat(x.data, repeats, axis=axis))

    def vjp(g):
        shp = list(x.shape)
        shp[axis:axis + 1] = [x.shape[axis], repeats]
        return g.reshape(shp).sum(axis=axis + 1)

    _record(out, [(x, vjp)])
    return out


def mean_heads(x, group: int, axis: int) -> NdArray:
    """Average consecutive groups of ``group`` indices along ``axis``."""
    x = as_array(x)
    h = x.shape[axis]
    if h % group != 0:
        raise GroupMismatch(f"axis extent {h} not divisible by group {group}")
    shp = list(x.shape)
    shp[axis:axis + 1] = [h // group, group]
    out = NdArray(x.data.reshape(shp).mean(axis=axis + 1))
    _count_elementwise(x.size)

    def vjp(g):
        return np.repeat(g / group, group, axis=axis)

    _record(out, [(x, vjp)])
    return out


# ---------------------------------------------------------------------------
# Convolutions


def _check_conv_shapes(ch: int, kernel: NdArray, groups: int):
    if ch % groups != 0:
        raise GroupMismatch(f"{ch} channels not divisible into {groups} groups")
    ch_out, cpg, k = kernel.shape
    if cpg != ch // groups:
        raise GroupMismatch(
            f"kernel expects {cpg} channels per group, input provides {ch // groups}"
        )
    if ch_out % groups != 0:
        raise GroupMismatch(f"{ch_out} output channels not divisible into {groups} groups")
    return ch_out, cpg, k


def _conv1d_core(xp: np.ndarray, kernel: np.ndarray, groups: int, s_out: int) -> np.ndarray:
    """Correlate a left-padded/windowed (L,B,Ch) buffer down to (s_out,B,Ch_out)."""
    ch_out, cpg, k = kernel.shape
    b = xp.shape[1]
    xg = xp.reshape(xp.shape[0], b, groups, cpg)
    kg = kernel.reshape(groups, ch_out // groups, cpg, k)
    out = np.zeros((s_out, b, groups, ch_out // groups), dtype=xp.dtype)
    for j in range(k):
        out += np.einsum("sbgi,goi->sbgo", xg[j:j + s_out], kg[:, :, :, j])
    return out.reshape(s_out, b, ch_out)


def _conv1d_vjps(xp_data, kernel, groups, s_out, pad):
    """Build vjp closures shared by the causal and valid conv variants."""
    ch_out, cpg, k = kernel.shape

    def vjp_x(g):
        b = g.shape[1]
        gg = g.reshape(s_out, b, groups, ch_out // groups)
        kg = kernel.data.reshape(groups, ch_out // groups, cpg, k)
        gxp = np.zeros_like(xp_data).reshape(xp_data.shape[0], b, groups, cpg)
        for j in range(k):
            gxp[j:j + s_out] += np.einsum("sbgo,goi->sbgi", gg, kg[:, :, :, j])
        gxp = gxp.reshape(xp_data.shape)
        return gxp[pad:] if pad else gxp

    def vjp_kernel(g):
        b = g.shape[1]
        gg = g.reshape(s_out, b, groups, ch_out // groups)
        xg = xp_data.reshape(xp_data.shape[0], b, groups, cpg)
        gk = np.zeros_like(kernel.data).reshape(groups, ch_out // groups, cpg, k)
        for j in range(k):
            gk[:, :, :, j] += np.einsum("sbgo,sbgi->goi", gg, xg[j:j + s_out])
        return gk.reshape(kernel.shape)

    return vjp_x, vjp_kernel


def causal_conv1d(x, kernel, groups: int) -> NdArray:
    """Causal grouped 1-D convolution over axis 0 of an (S,B,Ch) array.

    Left zero-padding of ``k - 1`` keeps output position ``t`` a function
    of inputs ``t-k+1 .. t`` only. ``kernel`` is (Ch_out, Ch/groups, k)
    with the last tap aligned to the current position; no bias.
    ``groups == Ch`` with one channel per group is a depthwise conv.
    """
    x = as_array(x)
    kernel = as_array(kernel)
    s, b, ch = x.shape
    ch_out, cpg, k = _check_conv_shapes(ch, kernel, groups)
    pad = k - 1
    xp = np.concatenate([np.zeros((pad, b, ch), dtype=x.data.dtype), x.data], axis=0)
    out_data = _conv1d_core(xp, kernel.data, groups, s)
    _count_conv(out_data.size, cpg * k)
    out = NdArray(out_data)

    vjp_x, vjp_kernel = _conv1d_vjps(xp, kernel, groups, s, pad)
    _record(out, [(x, vjp_x), (kernel, vjp_kernel)])
    return out


def conv1d_valid(x, kernel, groups: int) -> NdArray:
    """Unpadded grouped 1-D convolution: output length is S - k + 1.

    Used by streaming decode, where the caller supplies the exact input
    window; otherwise identical in semantics to :func:`causal_conv1d`.
    """
    x = as_array(x)
    kernel = as_array(kernel)
    s, b, ch = x.shape
    ch_out, cpg, k = _check_conv_shapes(ch, kernel, groups)
    if s < k:
        raise ShapeMismatch(f"window of {s} rows shorter than kernel width {k}")
    s_out = s - k + 1
    out_data = _conv1d_core(x.data, kernel.data, groups, s_out)
    _count_conv(out_data.size, cpg * k)
    out = NdArray(out_data)

    vjp_x, vjp_kernel = _conv1d_vjps(x.data, kernel, groups, s_out, 0)
    _record(out, [(x, vjp_x), (kernel, vjp_kernel)])
    return out
