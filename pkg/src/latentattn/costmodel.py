"""Closed-form cost accounting for the five attention variants.

Evaluates exact parameter counts, cache element counts, and prefill/decode
FLOPs (2 FLOPs per multiply-add, full S^2 terms — causal masking does not
change the closed forms), splits the matmul work into projection and
attention terms so instrumented counters can be checked against each term
exactly, and classifies decode arithmetic intensity against a hardware
roofline.

Convolution terms carry a known ambiguity: the standard closed form counts
the q/k convolutions over a latent of width E/C, while the built kernels
run over the packed q‖k tensor. Both the closed-form value and the
construction-derived value are reported; consumers decide which to trust.
The low-rank variant's rotary-head projections are likewise excluded from
its closed forms (its true cost is slightly higher), so those FLOPs are
tracked in separate scopes and surfaced as annotations rather than folded
in.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .baselines import GqaParams, MhaParams, MlaParams, init_weights
from .cca import CcaParams, init_cca_weights
from .errors import ConfigError, UnknownPreset, UnknownVariant
from .ndcore import count_flops, instrument_flops  # noqa: F401  (re-exported)

VARIANTS = ("mha", "gqa", "mla", "cca", "ccgqa")


def _exact_div(num: int, den: int, what: str) -> int:
    if num % den != 0:
        raise ConfigError(f"{what}: {num} not divisible by {den}")
    return num // den


@dataclass(frozen=True)
class AttnSpec:
    """Flat description of one attention instance, CSV/JSON friendly.

    ``n_h`` is always the query head count. ``n_kv_heads`` doubles as the
    GQA group count and the latent kv head count; ``c1``/``c2`` are the
    query/kv compression factors (pass ``c1 == c2`` for the plain
    compressed variant). ``rope_dim`` is the per-head rotary width of the
    low-rank variant's dedicated rotary heads.
    """

    variant: str
    e: int
    n_h: int
    label: str = ""
    n_kv_heads: int = 0
    c_q: int = 1
    c_kv: int = 1
    rope_dim: int = 0
    c1: int = 1
    c2: int = 1
    k_seq: int = 4
    k_ch: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UnknownVariant(f"unknown variant '{self.variant}'")
        if not self.label:
            object.__setattr__(self, "label", self.default_label())
        self.to_params()  # validate dimensions eagerly

    def default_label(self) -> str:
        if self.variant == "mha":
            return "mha"
        if self.variant == "gqa":
            return f"gqa-{self.sharing}x"
        if self.variant == "mla":
            return f"mla-q{self.c_q}-kv{self.c_kv}"
        if self.variant == "cca":
            return f"cca-{self.c1}x"
        return f"ccgqa-{self.c1}x{self.c2}"

    @property
    def sharing(self) -> int:
        """Cache compression factor of head sharing (query heads per kv head)."""
        return self.n_h // self.n_kv_heads if self.n_kv_heads else 1

    def to_params(self):
        if self.variant == "mha":
            return MhaParams(e=self.e, n_h=self.n_h)
        if self.variant == "gqa":
            if self.n_kv_heads < 1:
                raise ConfigError("gqa needs n_kv_heads >= 1")
            return GqaParams(e=self.e, n_h=self.n_h, n_kv_groups=self.n_kv_heads)
        if self.variant == "mla":
            return MlaParams(
                e=self.e, n_h=self.n_h, c_q=self.c_q, c_kv=self.c_kv,
                rope_dim=self.rope_dim,
            )
        n_kv = self.n_kv_heads if self.n_kv_heads else self.n_h
        return CcaParams(
            e=self.e, c1=self.c1, c2=self.c2,
            n_q_heads=self.n_h, n_kv_heads=n_kv,
            k_seq=self.k_seq, k_ch=self.k_ch,
        )

    def build_weights(self, seed: int):
        if self.variant in ("cca", "ccgqa"):
            return init_cca_weights(self.to_params(), seed)
        return init_weights(self.variant, self.to_params(), seed)


@dataclass(frozen=True)
class CostReport:
    """Closed-form cost row at a given (B, S), with term-level splits."""

    variant: str
    label: str
    b: int
    s: int
    params: int
    kv_elements: int
    prefill_flops: int
    decode_flops: int
    prefill_projection_flops: int
    prefill_attention_flops: int
    decode_projection_flops: int
    decode_attention_flops: int
    conv_params_formula: int
    conv_params_built: int
    conv_prefill_flops_formula: int
    conv_decode_flops_formula: int
    notes: tuple = ()
    measured: dict | None = None

    def with_measured(self, measured: dict) -> "CostReport":
        return replace(self, measured=measured)


def _conv_terms(spec: AttnSpec) -> tuple[int, int]:
    """(closed-form conv parameter term, construction-derived conv params).

    The closed form uses latent width E/C and the head count for the plain
    variant, and the packed width and total head count for the grouped
    one. The built kernels are depthwise (packed_width x k_seq) plus
    grouped (packed_width x d_h x k_ch); the two disagree by a factor of
    two in one term per variant, which is surfaced, never reconciled.
    """
    p: CcaParams = spec.to_params()
    if spec.variant == "cca":
        lat = spec.e // spec.c1
        heads = spec.n_h
        formula = 2 * lat * spec.k_seq + _exact_div(lat * lat, heads, "conv term") * spec.k_ch
    else:
        lat = spec.e // spec.c1 + spec.e // spec.c2
        heads = p.n_q_heads + p.n_kv_heads
        formula = 2 * lat * spec.k_seq + _exact_div(lat * lat, heads, "conv term") * spec.k_ch
    built = p.packed_width * spec.k_seq + p.packed_width * p.d_h * spec.k_ch
    return formula, built


def eval_cost_row(spec: AttnSpec, b: int, s: int) -> CostReport:
    """Exact integer evaluation of the closed-form cost row for (B, S).

    Decode FLOPs are per step, with ``s`` the context length including
    the step's own token. Head count enters the low-rank decode cost
    linearly through the per-head absorbed maps.
    """
    e, n_h = spec.e, spec.n_h
    e2 = e * e
    conv_pp = conv_pf = conv_df = 0
    conv_built = 0
    notes: tuple = ()

    if spec.variant == "mha":
        params = 4 * e2
        kv = 2 * b * s * e
        proj_pf, attn_pf = 8 * b * s * e2, 4 * b * e * s * s
        proj_df, attn_df = 8 * b * e2, 4 * b * e * s
    elif spec.variant == "gqa":
        g = spec.sharing
        params = 2 * e2 + _exact_div(2 * e2, g, "gqa params")
        kv = _exact_div(2 * b * s * e, g, "gqa cache")
        proj_pf = 4 * b * s * e2 + _exact_div(4 * b * s * e2, g, "gqa prefill")
        attn_pf = 4 * b * e * s * s
        proj_df = 4 * b * e2 + _exact_div(4 * b * e2, g, "gqa decode")
        attn_df = 4 * b * e * s
    elif spec.variant == "mla":
        cq, ckv = spec.c_q, spec.c_kv
        params = e2 + _exact_div(3 * e2, ckv, "mla params") + _exact_div(2 * e2, cq, "mla params")
        kv = _exact_div(b * s * e, ckv, "mla cache") + b * s * spec.rope_dim
        proj_pf = (
            2 * b * s * e2
            + _exact_div(4 * b * s * e2, cq, "mla prefill")
            + _exact_div(6 * b * s * e2, ckv, "mla prefill")
        )
        attn_pf = 4 * b * e * s * s
        proj_df = (
            _exact_div(2 * b * e2 + 2 * b * n_h * e2, ckv, "mla decode")
            + _exact_div(2 * b * n_h * e2, cq * ckv, "mla decode")
            + _exact_div(2 * b * e2, cq, "mla decode")
        )
        attn_df = _exact_div(4 * b * e * s * n_h, ckv, "mla decode attn")
        notes = (
            "rotary-head projections and scores are excluded from the closed "
            "forms; true cost is slightly higher",
        )
    else:
        c1, c2 = spec.c1, spec.c2
        proj_pf = _exact_div(4 * b * s * e2, c1, "prefill") + _exact_div(4 * b * s * e2, c2, "prefill")
        attn_pf = _exact_div(4 * b * e * s * s, c1, "prefill attn")
        proj_df = _exact_div(4 * b * e2, c1, "decode") + _exact_div(4 * b * e2, c2, "decode")
        attn_df = _exact_div(4 * b * e * s, c1, "decode attn")
        params = _exact_div(2 * e2, c1, "params") + _exact_div(2 * e2, c2, "params")
        kv = _exact_div(2 * b * s * e, c2, "cache")
        conv_pp, conv_built = _conv_terms(spec)
        conv_pf = 2 * b * s * conv_pp
        conv_df = 2 * b * conv_pp
        params += conv_pp
        notes = (
            "conv term uses the closed-form kernel count; the built kernels "
            f"hold {conv_built} parameters",
        )

    return CostReport(
        variant=spec.variant,
        label=spec.label,
        b=b,
        s=s,
        params=params,
        kv_elements=kv,
        prefill_flops=proj_pf + attn_pf + conv_pf,
        decode_flops=proj_df + attn_df + conv_df,
        prefill_projection_flops=proj_pf,
        prefill_attention_flops=attn_pf,
        decode_projection_flops=proj_df,
        decode_attention_flops=attn_df,
        conv_params_formula=conv_pp,
        conv_params_built=conv_built,
        conv_prefill_flops_formula=conv_pf,
        conv_decode_flops_formula=conv_df,
        notes=notes,
    )


def measure_costs(spec: AttnSpec, b: int, s: int, seed: int = 0) -> CostReport:
    """Closed forms plus counters from actually running the pipelines.

    Builds weights, runs one full (non-causal) forward and one streaming
    step at the last position under a FLOP counter, and attaches the
    per-scope measurements and constructed parameter counts. This executes
    the real numerics, so keep (B, S, E) at desk scale.
    """
    import numpy as np

    from .decode import decode_step
    from .ndcore import NdArray
    from .runners import run_forward, run_prefill

    if s < 1:
        raise ConfigError("measurement needs s >= 1")
    rep = eval_cost_row(spec, b, s)
    w = spec.build_weights(seed)
    rng = np.random.default_rng(seed)
    x = NdArray(rng.standard_normal((s, b, spec.e)))

    fc = count_flops(lambda: run_forward(spec, w, x, causal=False))
    _, state = run_prefill(spec, w, NdArray(x.data[: s - 1]))
    fc2 = count_flops(lambda: decode_step(state, NdArray(x.data[s - 1:])))

    counts = w.param_counts()
    measured = {
        "projection_params": counts.get("projection", 0),
        "conv_params": counts.get("conv", 0),
        "temperature_params": counts.get("temperature", 0),
        "rope_projection_params": counts.get("rope_projection", 0),
        "prefill_projection_flops": fc.by_scope.get("projection", 0),
        "prefill_attention_flops": fc.by_scope.get("attention", 0),
        "prefill_conv_flops": fc.by_scope.get("conv", 0),
        "prefill_rope_flops": fc.by_scope.get("rope_projection", 0)
        + fc.by_scope.get("rope_attention", 0),
        "decode_projection_flops": fc2.by_scope.get("projection", 0),
        "decode_attention_flops": fc2.by_scope.get("attention", 0),
        "decode_conv_flops": fc2.by_scope.get("conv", 0),
        "decode_rope_flops": fc2.by_scope.get("rope_projection", 0)
        + fc2.by_scope.get("rope_attention", 0),
        "kv_elements": state.kv_cache_elements(),
    }
    return rep.with_measured(measured)


# ---------------------------------------------------------------------------
# Roofline


@dataclass(frozen=True)
class HardwareSpec:
    """Peak compute and bandwidth; the ridge is their ratio in FLOPs/byte."""

    name: str
    peak_flops_per_s: float
    mem_bandwidth_bytes_per_s: float

    def __post_init__(self):
        if self.peak_flops_per_s <= 0 or self.mem_bandwidth_bytes_per_s <= 0:
            raise ConfigError("hardware rates must be positive")

    @property
    def ridge(self) -> float:
        return self.peak_flops_per_s / self.mem_bandwidth_bytes_per_s


_PRESETS = {
    # dense BF16 peak vs HBM3 bandwidth; ridge ~295 FLOPs/byte
    "h100-bf16": HardwareSpec("h100-bf16", 989e12, 3.35e12),
}


def hardware_preset(name: str) -> HardwareSpec:
    try:
        return _PRESETS[name]
    except KeyError:
        raise UnknownPreset(
            f"unknown hardware preset '{name}'; available: {sorted(_PRESETS)}"
        ) from None


def arithmetic_intensity(spec: AttnSpec) -> float:
    """Decode-time FLOPs per cache byte moved, in head-count units.

    Single query per step assumed. The low-rank variant reuses each latent
    row across all heads twice (scores and values); head sharing reuses
    each kv row across its query group.
    """
    if spec.variant == "mla":
        return float(2 * spec.n_h)
    if spec.variant == "gqa":
        return float(spec.sharing)
    if spec.variant == "mha":
        return 1.0
    if spec.variant in ("cca", "ccgqa"):
        return float(spec.to_params().group_size)
    raise UnknownVariant(spec.variant)


# intensity within this factor of the ridge counts as "near" it
NEAR_RIDGE_FRACTION = 0.5


def roofline_position(spec: AttnSpec, hw: HardwareSpec) -> dict:
    """Classify decode as memory- or compute-bound (ties go to compute)."""
    intensity = arithmetic_intensity(spec)
    ridge = hw.ridge
    bound = "compute" if intensity >= ridge else "memory"
    return {
        "variant": spec.variant,
        "label": spec.label,
        "intensity": intensity,
        "ridge": ridge,
        "bound": bound,
        "near_ridge": abs(intensity - ridge) <= NEAR_RIDGE_FRACTION * ridge,
    }
