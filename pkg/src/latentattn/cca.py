"""Compressed convolutional attention (CCA) and its grouped variant.

Queries and keys are down-projected into a shared latent, mixed by two
causal convolutions (depthwise over the sequence, then grouped per head
with in-head channel mixing), coupled through a pre-conv q/k mean, and
normalized with a learnable key temperature before rotary embedding.
Values skip the convolutions entirely: half the kv heads read the current
token's embedding, half the previous token's. Attention then runs wholly
inside the latent, and a single up-projection returns to model width.

Plain CCA is the grouped variant with one query head per kv head; a group
size above one shares each latent kv head across several query heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import attnops, ndcore
from .errors import ConfigError, GroupMismatch, OddKvHeads, ShapeMismatch
from .ndcore import NdArray, flop_scope
from .rope import RopeParams, rope_apply


@dataclass(frozen=True)
class CcaParams:
    """Geometry of one CCA/CCGQA instance.

    ``c1``/``c2`` are the query and key-value compression factors (equal
    for plain CCA). Query and kv latent head widths must agree, which
    pins ``c2 == c1 * (n_q_heads / n_kv_heads)``.
    """

    e: int
    c1: int
    c2: int
    n_q_heads: int
    n_kv_heads: int
    k_seq: int = 4
    k_ch: int = 4
    theta_base: float = 10000.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.e % self.c1 != 0 or self.e % self.c2 != 0:
            raise ConfigError(f"E={self.e} not divisible by c1={self.c1}/c2={self.c2}")
        if self.q_latent % self.n_q_heads != 0:
            raise ConfigError(
                f"query latent {self.q_latent} not divisible into {self.n_q_heads} heads"
            )
        if self.kv_latent % self.n_kv_heads != 0:
            raise ConfigError(
                f"kv latent {self.kv_latent} not divisible into {self.n_kv_heads} heads"
            )
        if self.n_q_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"{self.n_q_heads} query heads not divisible by {self.n_kv_heads} kv heads"
            )
        if self.q_latent // self.n_q_heads != self.kv_latent // self.n_kv_heads:
            raise ConfigError(
                "query and kv latent head widths differ: "
                f"{self.q_latent // self.n_q_heads} vs {self.kv_latent // self.n_kv_heads}"
            )
        if self.n_kv_heads % 2 != 0:
            raise OddKvHeads(
                f"value-shift needs an even kv head count, got {self.n_kv_heads}"
            )
        if self.k_seq < 1 or self.k_ch < 1:
            raise ConfigError("kernel widths must be >= 1")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")

    @property
    def q_latent(self) -> int:
        return self.e // self.c1

    @property
    def kv_latent(self) -> int:
        return self.e // self.c2

    @property
    def d_h(self) -> int:
        return self.q_latent // self.n_q_heads

    @property
    def group_size(self) -> int:
        return self.n_q_heads // self.n_kv_heads

    @property
    def packed_width(self) -> int:
        return self.q_latent + self.kv_latent

    @property
    def conv_groups(self) -> int:
        return self.n_q_heads + self.n_kv_heads

    @property
    def ring_len(self) -> int:
        """Pre-conv rows the streaming path must retain (current row excluded)."""
        return self.k_seq + self.k_ch - 2

    @property
    def score_scale(self) -> float:
        return 1.0 / math.sqrt(self.d_h)

    def rope_params(self) -> RopeParams:
        return RopeParams(rotary_dim=self.d_h, theta_base=self.theta_base)


@dataclass
class CcaWeights:
    """All learnable state: packed q/k down-projection, the two conv
    kernels, the two value maps, the output up-projection, and the raw
    per-kv-head key temperature (exponentiated at use)."""

    params: CcaParams
    w_qk: NdArray
    conv1: NdArray
    conv2: NdArray
    w_v: NdArray
    w_vbar: NdArray
    w_o: NdArray
    beta: NdArray

    def __post_init__(self):
        p = self.params
        expect = {
            "w_qk": (p.e, p.packed_width),
            "conv1": (p.packed_width, 1, p.k_seq),
            "conv2": (p.packed_width, p.d_h, p.k_ch),
            "w_v": (p.e, p.kv_latent // 2),
            "w_vbar": (p.e, p.kv_latent // 2),
            "w_o": (p.q_latent, p.e),
            "beta": (p.n_kv_heads,),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if tuple(got) != shape:
                raise ShapeMismatch(f"{name} has shape {got}, expected {shape}")
        if not np.isfinite(self.beta.data).all():
            raise ConfigError("beta must be finite")

    def named_arrays(self) -> list[tuple[str, NdArray]]:
        return [
            ("w_qk", self.w_qk),
            ("conv1", self.conv1),
            ("conv2", self.conv2),
            ("w_v", self.w_v),
            ("w_vbar", self.w_vbar),
            ("w_o", self.w_o),
            ("beta", self.beta),
        ]

    def param_counts(self) -> dict[str, int]:
        return {
            "projection": self.w_qk.size + self.w_v.size + self.w_vbar.size + self.w_o.size,
            "conv": self.conv1.size + self.conv2.size,
            "temperature": self.beta.size,
        }


def init_cca_weights(p: CcaParams, seed: int) -> CcaWeights:
    """Gaussian init (std 1/sqrt fan_in); temperature starts at zero."""
    rng = np.random.default_rng(seed)

    def gauss(shape, fan_in):
        return NdArray(
            rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape), requires_grad=True
        )

    return CcaWeights(
        params=p,
        w_qk=gauss((p.e, p.packed_width), p.e),
        conv1=gauss((p.packed_width, 1, p.k_seq), p.k_seq),
        conv2=gauss((p.packed_width, p.d_h, p.k_ch), p.d_h * p.k_ch),
        w_v=gauss((p.e, p.kv_latent // 2), p.e),
        w_vbar=gauss((p.e, p.kv_latent // 2), p.e),
        w_o=gauss((p.q_latent, p.e), p.q_latent),
        beta=NdArray(np.zeros(p.n_kv_heads), requires_grad=True),
    )


# ---------------------------------------------------------------------------
# Pipeline stages


def latent_project_qk(x: NdArray, w: CcaWeights):
    """Down-project to the packed q/k latent and split into pre-conv heads.

    Returns (q_pre (S,B,Hq,Dh), k_pre (S,B,Hk,Dh), packed (S,B,P)); the
    first ``q_latent`` packed channels are the query latent, the rest keys.
    """
    p = w.params
    if x.shape[-1] != p.e:
        raise ShapeMismatch(f"input width {x.shape[-1]} != E={p.e}")
    with flop_scope("projection"):
        packed = ndcore.matmul(x, w.w_qk)
    q_pre = attnops.split_heads(
        ndcore.slice_axis(packed, 2, 0, p.q_latent), p.n_q_heads
    )
    k_pre = attnops.split_heads(
        ndcore.slice_axis(packed, 2, p.q_latent, p.packed_width), p.n_kv_heads
    )
    return q_pre, k_pre, packed


def conv_stack(packed: NdArray, w: CcaWeights) -> NdArray:
    """Depthwise causal conv over the sequence, then a grouped causal conv
    that also mixes channels within each head (one group per q/k head)."""
    p = w.params
    c1 = ndcore.causal_conv1d(packed, w.conv1, groups=p.packed_width)
    return ndcore.causal_conv1d(c1, w.conv2, groups=p.conv_groups)


def qk_mean(q_conv, k_conv, q_pre, k_pre, group_size: int):
    """Add the mean of the pre-conv q/k latents back onto the convolved ones.

    The kv-head mean is broadcast to each head's query group; the reverse
    direction averages each group back down to its kv head.
    """
    hq, hk = q_pre.shape[2], k_pre.shape[2]
    if hq != group_size * hk:
        raise GroupMismatch(
            f"{hq} query heads != group_size {group_size} x {hk} kv heads"
        )
    k_broad = ndcore.repeat_heads(k_pre, group_size, axis=2) if group_size > 1 else k_pre
    qk_mu = ndcore.mul(ndcore.add(q_pre, k_broad), 0.5)
    q = ndcore.add(q_conv, qk_mu)
    k_mu = ndcore.mean_heads(qk_mu, group_size, axis=2) if group_size > 1 else qk_mu
    k = ndcore.add(k_conv, k_mu)
    return q, k


def value_shift(x: NdArray, w: CcaWeights) -> NdArray:
    """Two value projections: the first half of the kv heads reads the
    current token, the second half the previous token (zero at t=0)."""
    p = w.params
    if p.n_kv_heads % 2 != 0:
        raise OddKvHeads(f"kv head count {p.n_kv_heads} must be even")
    with flop_scope("projection"):
        v_now = ndcore.matmul(x, w.w_v)
        v_prev = ndcore.matmul(ndcore.shift_seq(x), w.w_vbar)
    v = ndcore.concat([v_now, v_prev], axis=2)
    return attnops.split_heads(v, p.n_kv_heads)


def normalize_and_temper(q, k, w: CcaWeights, p: CcaParams):
    """Unit-normalize per head, rescale to ``sqrt(d_h)``, and multiply keys
    by ``exp(beta)`` per kv head (queries are temperature-free)."""
    root_dh = math.sqrt(p.d_h)
    q_hat = ndcore.mul(ndcore.l2_normalize_heads(q, p.eps), root_dh)
    k_unit = ndcore.mul(ndcore.l2_normalize_heads(k, p.eps), root_dh)
    temp = ndcore.reshape(ndcore.exp(w.beta), (1, 1, p.n_kv_heads, 1))
    k_hat = ndcore.mul(k_unit, temp)
    return q_hat, k_hat


def latent_qkv(x: NdArray, w: CcaWeights, positions: list[int]):
    """Full prologue: everything up to (and including) rotary embedding.

    Returns the attention-ready (q_hat, k_hat, v) plus the pre-conv packed
    latent rows (which streaming decode retains as its conv window).
    """
    p = w.params
    q_pre, k_pre, packed = latent_project_qk(x, w)
    conv = conv_stack(packed, w)
    q_conv = attnops.split_heads(
        ndcore.slice_axis(conv, 2, 0, p.q_latent), p.n_q_heads
    )
    k_conv = attnops.split_heads(
        ndcore.slice_axis(conv, 2, p.q_latent, p.packed_width), p.n_kv_heads
    )
    q, k = qk_mean(q_conv, k_conv, q_pre, k_pre, p.group_size)
    v = value_shift(x, w)
    q_hat, k_hat = normalize_and_temper(q, k, w, p)
    rp = p.rope_params()
    q_hat = rope_apply(q_hat, positions, rp)
    k_hat = rope_apply(k_hat, positions, rp)
    return q_hat, k_hat, v, packed


def cca_forward(x: NdArray, w: CcaWeights, p: CcaParams, causal: bool) -> NdArray:
    """Attention executed entirely in the compressed latent.

    The group size (query heads per kv head) decides between the plain and
    grouped variants; both take exactly this code path.
    """
    if p != w.params:
        raise ConfigError("params object does not match the weight set")
    s = x.shape[0]
    q_hat, k_hat, v, _ = latent_qkv(x, w, list(range(s)))
    o = attnops.grouped_attention(q_hat, k_hat, v, p.score_scale, causal)
    with flop_scope("projection"):
        return ndcore.matmul(attnops.merge_heads(o), w.w_o)
