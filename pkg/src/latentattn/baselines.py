"""Baseline attention variants: MHA, GQA, and MLA.

MHA projects full-width q/k/v heads; GQA shares one k/v head across a
group of query heads; MLA stores a low-rank latent for k/v (plus a shared
rotary key head) and up-projects for attention. MLA additionally admits an
absorbed evaluation that folds the up-projections into the query and
output maps, which is the form streaming decode uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import attnops, ndcore
from .errors import ConfigError, MissingWeight, ShapeMismatch, UnexpectedWeight
from .ndcore import NdArray, flop_scope
from .rope import RopeParams, rope_apply


@dataclass(frozen=True)
class MhaParams:
    e: int
    n_h: int

    def __post_init__(self):
        if self.e % self.n_h != 0:
            raise ConfigError(f"E={self.e} not divisible by n_h={self.n_h}")

    @property
    def d(self) -> int:
        return self.e // self.n_h


@dataclass(frozen=True)
class GqaParams:
    """``n_kv_groups`` counts the kv heads; each serves ``n_h/n_kv_groups``
    query heads. ``sharing`` is the cache-compression factor that the
    closed-form cost rows are written in terms of."""

    e: int
    n_h: int
    n_kv_groups: int

    def __post_init__(self):
        if self.e % self.n_h != 0:
            raise ConfigError(f"E={self.e} not divisible by n_h={self.n_h}")
        if self.n_kv_groups < 1 or self.n_h % self.n_kv_groups != 0:
            raise ConfigError(
                f"n_h={self.n_h} not divisible into {self.n_kv_groups} kv groups"
            )

    @property
    def d(self) -> int:
        return self.e // self.n_h

    @property
    def kv_width(self) -> int:
        return self.n_kv_groups * self.d

    @property
    def sharing(self) -> int:
        return self.n_h // self.n_kv_groups


@dataclass(frozen=True)
class MlaParams:
    """Low-rank latent attention. ``c_q``/``c_kv`` are the query and
    key-value compression factors; ``rope_dim`` is the per-head width of
    the dedicated rotary heads (0 disables them)."""

    e: int
    n_h: int
    c_q: int
    c_kv: int
    rope_dim: int = 0
    theta_base: float = 10000.0

    def __post_init__(self):
        if self.e % self.n_h != 0:
            raise ConfigError(f"E={self.e} not divisible by n_h={self.n_h}")
        if self.e % self.c_q != 0 or self.e % self.c_kv != 0:
            raise ConfigError(
                f"E={self.e} not divisible by c_q={self.c_q} or c_kv={self.c_kv}"
            )
        if self.rope_dim < 0 or self.rope_dim % 2 != 0:
            raise ConfigError(f"rope_dim must be even and >= 0, got {self.rope_dim}")

    @property
    def d(self) -> int:
        return self.e // self.n_h

    @property
    def q_latent(self) -> int:
        return self.e // self.c_q

    @property
    def kv_latent(self) -> int:
        return self.e // self.c_kv

    @property
    def score_scale(self) -> float:
        return 1.0 / math.sqrt(self.d + self.rope_dim)

    def rope_params(self) -> RopeParams:
        return RopeParams(rotary_dim=self.rope_dim, theta_base=self.theta_base)


@dataclass
class WeightSet:
    """Named map of parameter arrays for one variant instance.

    Construction validates that exactly the names the variant defines are
    present, each with its exact shape.
    """

    variant: str
    params: object
    arrays: dict[str, NdArray] = field(default_factory=dict)

    def __post_init__(self):
        expected = expected_shapes(self.variant, self.params)
        for name, shape in expected.items():
            if name not in self.arrays:
                raise MissingWeight(f"{self.variant} weight set lacks '{name}'")
            got = self.arrays[name].shape
            if tuple(got) != tuple(shape):
                raise ShapeMismatch(
                    f"weight '{name}' has shape {got}, expected {shape}"
                )
        extras = set(self.arrays) - set(expected)
        if extras:
            raise UnexpectedWeight(
                f"{self.variant} weight set carries unknown entries {sorted(extras)}"
            )

    def __getitem__(self, name: str) -> NdArray:
        try:
            return self.arrays[name]
        except KeyError:
            raise MissingWeight(f"{self.variant} weight set lacks '{name}'") from None

    def param_counts(self) -> dict[str, int]:
        """Element counts grouped the way the closed-form cost rows group them."""
        rope_names = {"w_uqr", "w_kr"}
        counts = {"projection": 0, "rope_projection": 0}
        for name, arr in self.arrays.items():
            key = "rope_projection" if name in rope_names else "projection"
            counts[key] += arr.size
        return counts


def expected_shapes(variant: str, params) -> dict[str, tuple]:
    if variant == "mha":
        e = params.e
        return {"w_q": (e, e), "w_k": (e, e), "w_v": (e, e), "w_o": (e, e)}
    if variant == "gqa":
        e, kv = params.e, params.kv_width
        return {"w_q": (e, e), "w_k": (e, kv), "w_v": (e, kv), "w_o": (e, e)}
    if variant == "mla":
        e = params.e
        shapes = {
            "w_dq": (e, params.q_latent),
            "w_dkv": (e, params.kv_latent),
            "w_uq": (params.q_latent, e),
            "w_uk": (params.kv_latent, e),
            "w_uv": (params.kv_latent, e),
            "w_o": (e, e),
        }
        if params.rope_dim > 0:
            shapes["w_uqr"] = (params.q_latent, params.n_h * params.rope_dim)
            shapes["w_kr"] = (e, params.rope_dim)
        return shapes
    if variant == "mla_merged":
        e = params.e
        shapes = {
            "w_dq": (e, params.q_latent),
            "w_dkv": (e, params.kv_latent),
            "w_q_merged": (params.q_latent, params.n_h * params.kv_latent),
            "w_o_merged": (params.n_h * params.kv_latent, e),
        }
        if params.rope_dim > 0:
            shapes["w_uqr"] = (params.q_latent, params.n_h * params.rope_dim)
            shapes["w_kr"] = (e, params.rope_dim)
        return shapes
    raise ConfigError(f"no weight layout for variant '{variant}'")


def init_weights(variant: str, params, seed: int) -> WeightSet:
    """Gaussian init, zero mean, std 1/sqrt(fan_in), deterministic per seed."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in expected_shapes(variant, params).items():
        fan_in = shape[0]
        arrays[name] = NdArray(
            rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape), requires_grad=True
        )
    return WeightSet(variant, params, arrays)


# ---------------------------------------------------------------------------
# Forwards


def mha_forward(x: NdArray, w: WeightSet, causal: bool) -> NdArray:
    """Per-head softmax((q kᵀ)/√d) v with concatenated heads and output map."""
    p = w.params
    return _shared_kv_forward(x, w, p.n_h, p.n_h, 1.0 / math.sqrt(p.d), causal)


def gqa_forward(x: NdArray, w: WeightSet, causal: bool) -> NdArray:
    """MHA with each group of n_h/groups query heads reading one kv head."""
    p = w.params
    return _shared_kv_forward(
        x, w, p.n_h, p.n_kv_groups, 1.0 / math.sqrt(p.d), causal
    )


def _shared_kv_forward(x, w, n_q, n_kv, scale, causal):
    with flop_scope("projection"):
        q = ndcore.matmul(x, w["w_q"])
        k = ndcore.matmul(x, w["w_k"])
        v = ndcore.matmul(x, w["w_v"])
    o = attnops.grouped_attention(
        attnops.split_heads(q, n_q),
        attnops.split_heads(k, n_kv),
        attnops.split_heads(v, n_kv),
        scale,
        causal,
    )
    with flop_scope("projection"):
        return ndcore.matmul(attnops.merge_heads(o), w["w_o"])


def _mla_rope_parts(x, c_q, w, p, positions):
    """Rotary query heads (S,B,H,Er) and the single shared rotary key head."""
    with flop_scope("rope_projection"):
        q_r = ndcore.matmul(c_q, w["w_uqr"])
        k_r = ndcore.matmul(x, w["w_kr"])
    rp = p.rope_params()
    q_r = rope_apply(attnops.split_heads(q_r, p.n_h), positions, rp)
    k_r = rope_apply(attnops.split_heads(k_r, 1), positions, rp)
    return q_r, k_r


def _rope_scores(q_r, k_r, n_h):
    """Score contribution of the rotary heads, kept in its own FLOP scope."""
    with flop_scope("rope_attention"):
        return attnops.pair_scores(q_r, ndcore.repeat_heads(k_r, n_h, axis=2))


def mla_forward(x: NdArray, w: WeightSet, causal: bool) -> NdArray:
    """Full-head evaluation: down-project, up-project per head, attend.

    Rotary query heads come from the query latent and the single rotary
    key head straight from the input; their scores add to the latent-head
    scores before the shared softmax.
    """
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
    if p.rope_dim > 0:
        q_r, k_r = _mla_rope_parts(x, c_q, w, p, positions)
        extra = _rope_scores(q_r, k_r, p.n_h)
    o = attnops.grouped_attention(q, k, v, p.score_scale, causal, extra_scores=extra)
    with flop_scope("projection"):
        return ndcore.matmul(attnops.merge_heads(o), w["w_o"])


def mla_merge_projections(w: WeightSet) -> WeightSet:
    """Fold the k/v up-projections into the query and output maps.

    Per head h: the absorbed query map is W_uq_h @ W_uk_hᵀ and the
    absorbed output map is W_uv_h @ W_o_h, so attention afterwards touches
    only the kv latent (plus the rotary cache). Done once, outside any
    per-step cost accounting.
    """
    p = w.params
    d = p.d
    w_uq, w_uk, w_uv, w_o = (
        w["w_uq"].data,
        w["w_uk"].data,
        w["w_uv"].data,
        w["w_o"].data,
    )
    q_blocks = []
    o_blocks = []
    for h in range(p.n_h):
        cols = slice(h * d, (h + 1) * d)
        q_blocks.append(w_uq[:, cols] @ w_uk[:, cols].T)
        o_blocks.append(w_uv[:, cols] @ w_o[cols, :])
    arrays = {
        "w_dq": w["w_dq"],
        "w_dkv": w["w_dkv"],
        "w_q_merged": NdArray(np.concatenate(q_blocks, axis=1)),
        "w_o_merged": NdArray(np.concatenate(o_blocks, axis=0)),
    }
    if p.rope_dim > 0:
        arrays["w_uqr"] = w["w_uqr"]
        arrays["w_kr"] = w["w_kr"]
    return WeightSet("mla_merged", p, arrays)


def mla_absorbed_forward(x: NdArray, mw: WeightSet, causal: bool) -> NdArray:
    """Evaluate MLA through the merged maps: scores and values read the
    kv latent directly, one shared 'head' broadcast to all query heads."""
    p = mw.params
    s = x.shape[0]
    positions = list(range(s))
    with flop_scope("projection"):
        c_q = ndcore.matmul(x, mw["w_dq"])
        c_kv = ndcore.matmul(x, mw["w_dkv"])
        q_lat = ndcore.matmul(c_q, mw["w_q_merged"])
    q_lat = attnops.split_heads(q_lat, p.n_h)
    kv = attnops.split_heads(c_kv, 1)
    extra = None
    if p.rope_dim > 0:
        q_r, k_r = _mla_rope_parts(x, c_q, mw, p, positions)
        extra = _rope_scores(q_r, k_r, p.n_h)
    o = attnops.grouped_attention(
        q_lat, kv, kv, p.score_scale, causal, extra_scores=extra
    )
    with flop_scope("projection"):
        return ndcore.matmul(attnops.merge_heads(o), mw["w_o_merged"])
