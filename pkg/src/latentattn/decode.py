"""Token-by-token generation with variant-shaped caches.

Each variant caches the minimum the math requires: full k/v head rows
(MHA), one shared row per kv group (GQA), the kv latent plus the shared
rotary key row (MLA), or the normalized latent keys and shifted values
(CCA/CCGQA). CCA additionally keeps a short ring of pre-conv packed rows
(both convolutions are causal with finite receptive field, so
``k_seq + k_ch - 2`` rows of history are sufficient) and the previous raw
embedding row for the value shift. A decode step reads only this state,
never the token history.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attnops, baselines, ndcore
from .cca import CcaParams, CcaWeights, latent_qkv, normalize_and_temper, qk_mean
from .errors import ConfigError, ShapeMismatch, StateCorrupt, UnknownVariant
from .ndcore import NdArray, flop_scope
from .rope import rope_apply


class _GrowBuf:
    """Append-only row buffer with amortized doubling."""

    def __init__(self, row_shape: tuple, dtype):
        self._data = np.empty((4,) + tuple(row_shape), dtype=dtype)
        self._len = 0

    def append(self, row: np.ndarray) -> None:
        if self._len == self._data.shape[0]:
            grown = np.empty((2 * self._len,) + self._data.shape[1:], self._data.dtype)
            grown[: self._len] = self._data
            self._data = grown
        self._data[self._len] = row
        self._len += 1

    def extend(self, rows: np.ndarray) -> None:
        for row in rows:
            self.append(row)

    def __len__(self) -> int:
        return self._len

    def view(self) -> np.ndarray:
        return self._data[: self._len]


@dataclass
class DecodeState:
    """Streaming state for one batch of sequences of a single variant."""

    variant: str
    weights: object
    batch: int
    position: int = 0
    caches: dict = field(default_factory=dict)
    conv_ring: np.ndarray | None = None
    prev_x: np.ndarray | None = None
    mla_mode: str = "mqa"
    merged: object = None

    def kv_cache_elements(self) -> int:
        return sum(buf.view().size for buf in self.caches.values())

    def check(self) -> None:
        for name, buf in self.caches.items():
            if len(buf) != self.position:
                raise StateCorrupt(
                    f"cache '{name}' holds {len(buf)} rows at position {self.position}"
                )
        if self.variant in ("cca", "ccgqa"):
            p = self.weights.params
            want = min(self.position, p.ring_len)
            have = 0 if self.conv_ring is None else self.conv_ring.shape[0]
            if have != want:
                raise StateCorrupt(f"conv ring holds {have} rows, expected {want}")
            if self.position > 0 and self.prev_x is None:
                raise StateCorrupt("previous-embedding row missing after step 0")


@dataclass(frozen=True)
class CacheReport:
    """Cache footprint against a full-head baseline at the same (B,S,E)."""

    elements: int
    bytes: int
    baseline_elements: int
    ratio: float


_VARIANTS = ("mha", "gqa", "mla", "cca", "ccgqa")


def _check_variant(variant: str) -> None:
    if variant not in _VARIANTS:
        raise UnknownVariant(f"unknown variant '{variant}'")


def _dtype():
    return ndcore.get_default_dtype()


def new_state(variant: str, w, batch: int, mla_mode: str = "mqa") -> DecodeState:
    """Empty state at position 0 with variant-shaped cache buffers."""
    _check_variant(variant)
    dt = _dtype()
    p = w.params
    state = DecodeState(variant=variant, weights=w, batch=batch, mla_mode=mla_mode)
    if variant == "mha":
        shape = (batch, p.n_h, p.d)
        state.caches = {"k": _GrowBuf(shape, dt), "v": _GrowBuf(shape, dt)}
    elif variant == "gqa":
        shape = (batch, p.n_kv_groups, p.d)
        state.caches = {"k": _GrowBuf(shape, dt), "v": _GrowBuf(shape, dt)}
    elif variant == "mla":
        state.caches = {"kv_latent": _GrowBuf((batch, p.kv_latent), dt)}
        if p.rope_dim > 0:
            state.caches["rope_k"] = _GrowBuf((batch, p.rope_dim), dt)
        if mla_mode == "mqa":
            state.merged = baselines.mla_merge_projections(w)
        elif mla_mode != "mha":
            raise ConfigError(f"unknown mla decode mode '{mla_mode}'")
    else:
        state.caches = {
            "k_hat": _GrowBuf((batch, p.n_kv_heads, p.d_h), dt),
            "v": _GrowBuf((batch, p.n_kv_heads, p.kv_latent // p.n_kv_heads), dt),
        }
        state.conv_ring = np.zeros((0, batch, p.packed_width), dtype=dt)
    return state


# ---------------------------------------------------------------------------
# Prefill


def prefill(x: NdArray, w, variant: str, mla_mode: str = "mqa"):
    """Causal forward over the whole prompt, materializing decode state.

    Outputs are bitwise what the variant's forward produces; the state
    lands at position S with caches, conv ring, and previous row filled.
    """
    _check_variant(variant)
    s, b, _ = x.shape
    state = new_state(variant, w, b, mla_mode)
    if s == 0:
        return ndcore.zeros((0, b, x.shape[2])), state

    if variant in ("mha", "gqa"):
        out, k, v = _shared_kv_prefill(x, w)
        state.caches["k"].extend(k.data)
        state.caches["v"].extend(v.data)
    elif variant == "mla":
        out, c_kv, k_r = _mla_prefill(x, w)
        state.caches["kv_latent"].extend(c_kv.data)
        if k_r is not None:
            state.caches["rope_k"].extend(k_r.data.reshape(s, b, -1))
    else:
        p = w.params
        q_hat, k_hat, v, packed = latent_qkv(x, w, list(range(s)))
        o = attnops.grouped_attention(q_hat, k_hat, v, p.score_scale, causal=True)
        with flop_scope("projection"):
            out = ndcore.matmul(attnops.merge_heads(o), w.w_o)
        state.caches["k_hat"].extend(k_hat.data)
        state.caches["v"].extend(v.data)
        keep = min(p.ring_len, s)
        state.conv_ring = packed.data[s - keep:].copy()
        state.prev_x = x.data[-1].copy()
    state.position = s
    return out, state


def _shared_kv_prefill(x, w):
    p = w.params
    n_kv = p.n_h if w.variant == "mha" else p.n_kv_groups
    with flop_scope("projection"):
        q = ndcore.matmul(x, w["w_q"])
        k = ndcore.matmul(x, w["w_k"])
        v = ndcore.matmul(x, w["w_v"])
    q = attnops.split_heads(q, p.n_h)
    k = attnops.split_heads(k, n_kv)
    v = attnops.split_heads(v, n_kv)
    o = attnops.grouped_attention(q, k, v, 1.0 / np.sqrt(p.d), causal=True)
    with flop_scope("projection"):
        out = ndcore.matmul(attnops.merge_heads(o), w["w_o"])
    return out, k, v


def _mla_prefill(x, w):
    p = w.params
    s = x.shape[0]
    positions = list(range(s))
    with flop_scope("projection"):
        c_q = ndcore.matmul(x, w["w_dq"])
        c_kv = ndcore.matmul(x, w["w_dkv"])
        q = ndcore.matmul(c_q, w["w_uq"])
        k = ndcore.matmul(c_kv, w["w_uk"])
        v = ndcore.matmul(c_kv, w["w_uv"])
    q = attnops.split_heads(q, p.n_h)
    k = attnops.split_heads(k, p.n_h)
    v = attnops.split_heads(v, p.n_h)
    extra = None
    k_r = None
    if p.rope_dim > 0:
        q_r, k_r = baselines._mla_rope_parts(x, c_q, w, p, positions)
        extra = baselines._rope_scores(q_r, k_r, p.n_h)
    o = attnops.grouped_attention(q, k, v, p.score_scale, True, extra_scores=extra)
    with flop_scope("projection"):
        out = ndcore.matmul(attnops.merge_heads(o), w["w_o"])
    return out, c_kv, k_r


# ---------------------------------------------------------------------------
# Decode steps


def decode_step(state: DecodeState, x_t: NdArray) -> NdArray:
    """Consume one token row (1,B,E) and emit the causal output row.

    Appends one row per kv head (one latent row for MLA/CCA) to the cache
    and advances the CCA conv ring and previous-embedding row.
    """
    _check_variant(state.variant)
    if x_t.ndim != 3 or x_t.shape[0] != 1:
        raise ShapeMismatch(f"decode step expects (1,B,E), got {x_t.shape}")
    if x_t.shape[1] != state.batch:
        raise ShapeMismatch(
            f"batch {x_t.shape[1]} does not match state batch {state.batch}"
        )
    state.check()
    if state.variant in ("mha", "gqa"):
        out = _step_shared_kv(state, x_t)
    elif state.variant == "mla":
        out = _step_mla(state, x_t)
    else:
        out = _step_cca(state, x_t)
    state.position += 1
    return out


def _step_shared_kv(state: DecodeState, x_t: NdArray) -> NdArray:
    w = state.weights
    p = w.params
    n_kv = p.n_h if state.variant == "mha" else p.n_kv_groups
    with flop_scope("projection"):
        q = ndcore.matmul(x_t, w["w_q"])
        k_row = ndcore.matmul(x_t, w["w_k"])
        v_row = ndcore.matmul(x_t, w["w_v"])
    state.caches["k"].append(k_row.data.reshape(state.batch, n_kv, p.d))
    state.caches["v"].append(v_row.data.reshape(state.batch, n_kv, p.d))
    q = attnops.split_heads(q, p.n_h)
    k = NdArray(state.caches["k"].view())
    v = NdArray(state.caches["v"].view())
    o = attnops.grouped_attention(
        q, k, v, 1.0 / np.sqrt(p.d), causal=True, q_offset=state.position
    )
    with flop_scope("projection"):
        return ndcore.matmul(attnops.merge_heads(o), w["w_o"])


def _step_mla(state: DecodeState, x_t: NdArray) -> NdArray:
    w = state.weights
    p = w.params
    b = state.batch
    pos = state.position
    with flop_scope("projection"):
        c_q = ndcore.matmul(x_t, w["w_dq"])
        c_kv_row = ndcore.matmul(x_t, w["w_dkv"])
    state.caches["kv_latent"].append(c_kv_row.data.reshape(b, p.kv_latent))

    q_r = None
    if p.rope_dim > 0:
        rp = p.rope_params()
        with flop_scope("rope_projection"):
            q_r_flat = ndcore.matmul(c_q, w["w_uqr"])
            k_r_row = ndcore.matmul(x_t, w["w_kr"])
        q_r = rope_apply(attnops.split_heads(q_r_flat, p.n_h), [pos], rp)
        k_r_row = rope_apply(attnops.split_heads(k_r_row, 1), [pos], rp)
        state.caches["rope_k"].append(k_r_row.data.reshape(b, p.rope_dim))

    extra = None
    if p.rope_dim > 0:
        k_r_all = NdArray(state.caches["rope_k"].view().reshape(pos + 1, b, 1, p.rope_dim))
        extra = baselines._rope_scores(q_r, k_r_all, p.n_h)

    if state.mla_mode == "mqa":
        mw = state.merged
        with flop_scope("projection"):
            q_lat = ndcore.matmul(c_q, mw["w_q_merged"])
        q_lat = attnops.split_heads(q_lat, p.n_h)
        kv = NdArray(state.caches["kv_latent"].view().reshape(pos + 1, b, 1, p.kv_latent))
        o = attnops.grouped_attention(
            q_lat, kv, kv, p.score_scale, causal=True,
            extra_scores=extra, q_offset=pos,
        )
        with flop_scope("projection"):
            return ndcore.matmul(attnops.merge_heads(o), mw["w_o_merged"])

    # full-head mode: re-expand every cached latent row this step
    latents = NdArray(state.caches["kv_latent"].view())
    with flop_scope("projection"):
        q = ndcore.matmul(c_q, w["w_uq"])
        k = ndcore.matmul(latents, w["w_uk"])
        v = ndcore.matmul(latents, w["w_uv"])
    q = attnops.split_heads(q, p.n_h)
    k = attnops.split_heads(k, p.n_h)
    v = attnops.split_heads(v, p.n_h)
    o = attnops.grouped_attention(
        q, k, v, p.score_scale, causal=True, extra_scores=extra, q_offset=pos
    )
    with flop_scope("projection"):
        return ndcore.matmul(attnops.merge_heads(o), w["w_o"])


def _step_cca(state: DecodeState, x_t: NdArray) -> NdArray:
    w: CcaWeights = state.weights
    p: CcaParams = w.params
    b = state.batch
    pos = state.position

    with flop_scope("projection"):
        packed_t = ndcore.matmul(x_t, w.w_qk)

    # conv window: ring rows plus the current one, zero-filled while short
    window = np.concatenate([state.conv_ring, packed_t.data], axis=0)
    deficit = (p.ring_len + 1) - window.shape[0]
    if deficit > 0:
        window = np.concatenate(
            [np.zeros((deficit, b, p.packed_width), dtype=window.dtype), window]
        )
    mid = ndcore.conv1d_valid(NdArray(window), w.conv1, groups=p.packed_width)
    conv_t = ndcore.conv1d_valid(mid, w.conv2, groups=p.conv_groups)

    q_pre = attnops.split_heads(
        ndcore.slice_axis(packed_t, 2, 0, p.q_latent), p.n_q_heads
    )
    k_pre = attnops.split_heads(
        ndcore.slice_axis(packed_t, 2, p.q_latent, p.packed_width), p.n_kv_heads
    )
    q_conv = attnops.split_heads(
        ndcore.slice_axis(conv_t, 2, 0, p.q_latent), p.n_q_heads
    )
    k_conv = attnops.split_heads(
        ndcore.slice_axis(conv_t, 2, p.q_latent, p.packed_width), p.n_kv_heads
    )
    q, k = qk_mean(q_conv, k_conv, q_pre, k_pre, p.group_size)

    prev = state.prev_x if state.prev_x is not None else np.zeros((b, p.e))
    with flop_scope("projection"):
        v_now = ndcore.matmul(x_t, w.w_v)
        v_prev = ndcore.matmul(NdArray(prev.reshape(1, b, p.e)), w.w_vbar)
    v_t = attnops.split_heads(ndcore.concat([v_now, v_prev], axis=2), p.n_kv_heads)

    q_hat, k_hat = normalize_and_temper(q, k, w, p)
    rp = p.rope_params()
    q_hat = rope_apply(q_hat, [pos], rp)
    k_hat = rope_apply(k_hat, [pos], rp)

    state.caches["k_hat"].append(k_hat.data[0])
    state.caches["v"].append(v_t.data[0])
    k_all = NdArray(state.caches["k_hat"].view())
    v_all = NdArray(state.caches["v"].view())
    o = attnops.grouped_attention(
        q_hat, k_all, v_all, p.score_scale, causal=True, q_offset=pos
    )
    with flop_scope("projection"):
        out = ndcore.matmul(attnops.merge_heads(o), w.w_o)

    if p.ring_len > 0:
        ring = np.concatenate([state.conv_ring, packed_t.data], axis=0)
        state.conv_ring = ring[-p.ring_len:].copy()
    state.prev_x = x_t.data[0].copy()
    return out


def cache_report(state: DecodeState, element_bytes: int) -> CacheReport:
    """Exact cache element count and compression vs full-head caching."""
    p = state.weights.params
    elements = state.kv_cache_elements()
    baseline = 2 * state.batch * state.position * p.e
    ratio = baseline / elements if elements else float("inf")
    return CacheReport(
        elements=elements,
        bytes=elements * element_bytes,
        baseline_elements=baseline,
        ratio=ratio,
    )
