"""Release-gate verification suites.

Nine orthogonal checks: streaming decode against causal prefill for every
variant, the merged/full-head evaluation identity, finite-difference
gradient checks of the compressed pipeline, instrumented-counter
conformance to the closed-form cost rows, curve-shape ratios, strict
causality under suffix perturbation, degenerate-configuration
equivalences, roofline classification, and a latency direction check.
Each returns a named result; the JSON report carries one entry per check.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import bench as bench_mod
from . import curves as curves_mod
from .baselines import WeightSet, init_weights, mha_forward, gqa_forward
from .baselines import mla_absorbed_forward, mla_forward, mla_merge_projections
from .baselines import MlaParams
from .costmodel import (
    AttnSpec,
    eval_cost_row,
    hardware_preset,
    measure_costs,
    roofline_position,
)
from .errors import ConfigError
from .ndcore import NdArray, Tape, finite_diff, grad, mul, sum_all
from .runners import run_decode_loop, run_forward, run_prefill

FAULT_POINTS = ("prefill_decode_equivalence",)


@dataclass(frozen=True)
class VerifyConfig:
    seed: int = 0
    equivalence_seeds: int = 5
    equivalence_batches: tuple = (1, 2)
    equivalence_lengths: tuple = (1, 2, 13, 64)
    equivalence_tol: float = 1e-10
    identity_seeds: int = 10
    gradient_seeds: int = 3
    gradient_step: float = 1e-6
    gradient_tol: float = 1e-4
    conformance_specs: int = 20
    cache_lengths: tuple = (1, 7, 64)
    causality_trials: int = 200
    causality_tol: float = 1e-12
    bench_s_grid: tuple = (256, 512)
    bench_reps: int = 3
    fault_injection: str | None = None

    def __post_init__(self):
        if self.fault_injection is not None and self.fault_injection not in FAULT_POINTS:
            raise ConfigError(
                f"unknown fault injection point '{self.fault_injection}'; "
                f"available: {FAULT_POINTS}"
            )


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    duration_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "detail": self.detail,
            "duration_s": round(self.duration_s, 3),
        }


@dataclass
class VerifyReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}

    def failing(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]


def _rel_err_rows(a: np.ndarray, b: np.ndarray) -> float:
    """Worst per-position relative error between (S,B,E) output stacks."""
    worst = 0.0
    for t in range(a.shape[0]):
        scale = max(np.abs(a[t]).max(), np.abs(b[t]).max(), 1e-12)
        worst = max(worst, float(np.abs(a[t] - b[t]).max() / scale))
    return worst


def _equivalence_matrix(e: int = 32) -> list[tuple[AttnSpec, str]]:
    """(spec, decode mode) pairs covering every variant and cache layout."""
    n_h = 4
    cells: list[tuple[AttnSpec, str]] = [
        (AttnSpec("mha", e=e, n_h=n_h), "mqa"),
        (AttnSpec("gqa", e=e, n_h=n_h, n_kv_heads=1, label="gqa-mqa"), "mqa"),
        (AttnSpec("gqa", e=e, n_h=n_h, n_kv_heads=2, label="gqa-2"), "mqa"),
        (AttnSpec("gqa", e=e, n_h=n_h, n_kv_heads=n_h, label="gqa-full"), "mqa"),
        (AttnSpec("mla", e=e, n_h=n_h, c_q=2, c_kv=4, rope_dim=4), "mqa"),
        (AttnSpec("mla", e=e, n_h=n_h, c_q=2, c_kv=4, rope_dim=4, label="mla-full"), "mha"),
        (AttnSpec("cca", e=e, n_h=n_h, n_kv_heads=n_h, c1=2, c2=2, k_seq=3, k_ch=2), "mqa"),
        (AttnSpec("ccgqa", e=e, n_h=n_h, n_kv_heads=2, c1=2, c2=4), "mqa"),
    ]
    return cells


def _perturbable_array(w) -> NdArray:
    if isinstance(w, WeightSet):
        return next(iter(w.arrays.values()))
    return w.w_qk


def check_prefill_decode_equivalence(cfg: VerifyConfig) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    worst_at = ""
    inject = cfg.fault_injection == "prefill_decode_equivalence"
    for spec, mode in _equivalence_matrix():
        for seed in range(cfg.equivalence_seeds):
            w = spec.build_weights(cfg.seed + seed)
            rng = np.random.default_rng(1000 + seed)
            for b in cfg.equivalence_batches:
                for s in cfg.equivalence_lengths:
                    x = NdArray(rng.standard_normal((s, b, spec.e)))
                    pre, _ = run_prefill(spec, w, x, mode)
                    if inject:
                        _perturbable_array(w).data.flat[0] += 1e-3
                    try:
                        dec, _ = run_decode_loop(spec, w, x, mode)
                    finally:
                        if inject:
                            _perturbable_array(w).data.flat[0] -= 1e-3
                    err = _rel_err_rows(pre.data, dec)
                    if err > worst:
                        worst, worst_at = err, f"{spec.label} mode={mode} B={b} S={s} seed={seed}"
    dur = time.perf_counter() - t0
    ok = worst < cfg.equivalence_tol and dur < 120.0
    return CheckResult(
        "prefill_decode_equivalence",
        ok,
        f"worst per-position rel err {worst:.3e} (at {worst_at or 'n/a'}), "
        f"tol {cfg.equivalence_tol:.0e}, runtime {dur:.1f}s (limit 120s)",
        dur,
    )


def check_mla_mode_identity(cfg: VerifyConfig) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    p = MlaParams(e=32, n_h=4, c_q=2, c_kv=4, rope_dim=0)
    for seed in range(cfg.identity_seeds):
        w = init_weights("mla", p, cfg.seed + seed)
        mw = mla_merge_projections(w)
        rng = np.random.default_rng(2000 + seed)
        x = NdArray(rng.standard_normal((9, 2, 32)))
        a = mla_forward(x, w, causal=True).data
        b = mla_absorbed_forward(x, mw, causal=True).data
        worst = max(worst, _rel_err_rows(a, b))
    ok = worst < cfg.equivalence_tol
    return CheckResult(
        "mla_mode_identity",
        ok,
        f"merged vs full-head evaluation, no rotary heads: worst rel err "
        f"{worst:.3e}, tol {cfg.equivalence_tol:.0e}, {cfg.identity_seeds} seeds",
        time.perf_counter() - t0,
    )


def _gradient_specs() -> list[AttnSpec]:
    return [
        AttnSpec("cca", e=16, n_h=2, n_kv_heads=2, c1=2, c2=2, k_seq=3, k_ch=2),
        AttnSpec("ccgqa", e=16, n_h=4, n_kv_heads=2, c1=2, c2=4, k_seq=2, k_ch=2),
    ]


def check_gradients(cfg: VerifyConfig) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    worst_at = ""
    s_len = 6
    for spec in _gradient_specs():
        for seed in range(cfg.gradient_seeds):
            w = spec.build_weights(cfg.seed + seed)
            rng = np.random.default_rng(3000 + seed)
            x = NdArray(rng.uniform(-1, 1, (s_len, 1, spec.e)))
            probe = NdArray(rng.uniform(-1, 1, (s_len, 1, spec.e)))

            def loss_value(_p=None):
                out = run_forward(spec, w, x, causal=True)
                return sum_all(mul(out, probe))

            with Tape() as tape:
                loss = loss_value()
            params = [arr for _, arr in w.named_arrays()]
            analytic = grad(tape, loss, params)
            for (name, arr), g in zip(w.named_arrays(), analytic):
                fd = finite_diff(lambda p: loss_value().item(), arr, cfg.gradient_step)
                denom = np.maximum(np.maximum(np.abs(g.data), np.abs(fd.data)), 1e-6)
                err = float((np.abs(g.data - fd.data) / denom).max())
                if err > worst:
                    worst, worst_at = err, f"{spec.label}/{name} seed={seed}"
    ok = worst < cfg.gradient_tol
    return CheckResult(
        "gradient_check",
        ok,
        f"analytic vs central differences over every parameter: worst rel err "
        f"{worst:.3e} (at {worst_at}), tol {cfg.gradient_tol:.0e}",
        time.perf_counter() - t0,
    )


def random_valid_spec(variant: str, rng) -> AttnSpec:
    k_seq = int(rng.integers(1, 5))
    k_ch = int(rng.integers(1, 5))
    if variant == "mha":
        n_h = int(rng.choice([2, 3, 4]))
        return AttnSpec("mha", e=n_h * int(rng.choice([4, 8])), n_h=n_h)
    if variant == "gqa":
        groups = int(rng.choice([1, 2, 4]))
        n_h = groups * int(rng.choice([1, 2, 4]))
        return AttnSpec("gqa", e=n_h * int(rng.choice([4, 8])), n_h=n_h, n_kv_heads=groups)
    if variant == "mla":
        n_h = int(rng.choice([2, 4]))
        d = int(rng.choice([4, 8]))
        e = n_h * d
        choices = [c for c in (1, 2, 4) if e % c == 0]
        return AttnSpec(
            "mla", e=e, n_h=n_h,
            c_q=int(rng.choice(choices)), c_kv=int(rng.choice(choices)),
            rope_dim=int(rng.choice([0, 2, 4])),
        )
    if variant == "cca":
        hk = int(rng.choice([2, 4]))
        d_h = int(rng.choice([2, 4]))
        c = int(rng.choice([1, 2, 4]))
        e = c * hk * d_h
        return AttnSpec(
            "cca", e=e, n_h=hk, n_kv_heads=hk, c1=c, c2=c, k_seq=k_seq, k_ch=k_ch
        )
    group = int(rng.choice([2, 4]))
    hk = 2
    d_h = int(rng.choice([2, 4]))
    c1 = int(rng.choice([1, 2]))
    e = c1 * group * hk * d_h
    return AttnSpec(
        "ccgqa", e=e, n_h=group * hk, n_kv_heads=hk,
        c1=c1, c2=c1 * group, k_seq=k_seq, k_ch=k_ch,
    )


def _conformance_failures(spec: AttnSpec, cfg: VerifyConfig, rng) -> list[str]:
    fails: list[str] = []
    seed = int(rng.integers(0, 2**31))
    b, s = int(rng.choice([1, 2])), int(rng.integers(3, 9))
    rep = measure_costs(spec, b, s, seed)
    m = rep.measured

    checks = [
        ("projection params", m["projection_params"], rep.params - rep.conv_params_formula),
        ("prefill projection", m["prefill_projection_flops"], rep.prefill_projection_flops),
        ("prefill attention", m["prefill_attention_flops"], rep.prefill_attention_flops),
        ("decode projection", m["decode_projection_flops"], rep.decode_projection_flops),
        ("decode attention", m["decode_attention_flops"], rep.decode_attention_flops),
        ("cache elements", m["kv_elements"], rep.kv_elements),
    ]
    if spec.variant in ("cca", "ccgqa"):
        checks.append(("conv params", m["conv_params"], rep.conv_params_built))
    for what, got, want in checks:
        if got != want:
            fails.append(f"{spec.label}: {what} {got} != closed form {want}")

    w = spec.build_weights(seed)
    for sc in cfg.cache_lengths:
        xc = NdArray(np.random.default_rng(51).standard_normal((sc, b, spec.e)))
        _, st = run_prefill(spec, w, xc)
        want = eval_cost_row(spec, b, sc).kv_elements
        if st.kv_cache_elements() != want:
            fails.append(
                f"{spec.label}: cache at S={sc} has {st.kv_cache_elements()} "
                f"elements, closed form {want}"
            )
    return fails


def check_cost_conformance(cfg: VerifyConfig) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed + 42)
    variants = ("mha", "gqa", "mla", "cca", "ccgqa")
    fails: list[str] = []
    n = 0
    while n < cfg.conformance_specs:
        spec = random_valid_spec(variants[n % len(variants)], rng)
        fails.extend(_conformance_failures(spec, cfg, rng))
        n += 1
    ok = not fails
    detail = (
        f"{cfg.conformance_specs} random specs: counters and constructed counts "
        "match every closed-form projection/attention/cache term exactly"
        if ok
        else "; ".join(fails[:4])
    )
    return CheckResult("cost_model_conformance", ok, detail, time.perf_counter() - t0)


def check_cost_curve_shape(cfg: VerifyConfig) -> CheckResult:
    t0 = time.perf_counter()
    specs = curves_mod.default_curve_specs()
    grid = curves_mod.DEFAULT_S_GRID
    rows = curves_mod.cost_rows(specs, grid, b=1)
    by = {(r["variant"], r["S"]): r for r in rows}
    fails = []

    ratio = by[("mha", 16384)]["prefill_flops"] / by[("cca-4x", 16384)]["prefill_flops"]
    if not (3.95 <= ratio <= 4.05):
        fails.append(f"prefill ratio mha/cca-4x at S=16384 is {ratio:.4f}, want 4.00±0.05")

    for s in grid:
        mha_kv = by[("mha", s)]["kv_elements"]
        for label, want in (("gqa-4x", 4), ("cca-4x", 4), ("ccgqa-2x8x", 8)):
            got = by[(label, s)]["kv_elements"]
            if mha_kv != want * got:
                fails.append(f"kv ratio {label} at S={s}: {mha_kv}/{got} != {want}")

    ok = not fails
    detail = (
        f"prefill ratio mha/cca-4x at S=16384 = {ratio:.4f} (in 4.00±0.05); "
        "cache ratios exact at every grid point"
        if ok
        else "; ".join(fails[:4])
    )
    return CheckResult("cost_curve_shape", ok, detail, time.perf_counter() - t0)


def check_causality(cfg: VerifyConfig) -> CheckResult:
    t0 = time.perf_counter()
    specs = [
        AttnSpec("mha", e=32, n_h=4),
        AttnSpec("gqa", e=32, n_h=4, n_kv_heads=2),
        AttnSpec("mla", e=32, n_h=4, c_q=2, c_kv=4, rope_dim=4),
        AttnSpec("cca", e=32, n_h=4, n_kv_heads=4, c1=2, c2=2),
        AttnSpec("ccgqa", e=32, n_h=4, n_kv_heads=2, c1=2, c2=4),
    ]
    s_len = 12
    worst = 0.0
    for spec in specs:
        w = spec.build_weights(cfg.seed)
        rng = np.random.default_rng(cfg.seed + 7)
        x = rng.standard_normal((s_len, 1, spec.e))
        base = run_forward(spec, w, NdArray(x), causal=True).data
        for _ in range(cfg.causality_trials):
            t = int(rng.integers(1, s_len))
            xp = x.copy()
            xp[t:] += rng.standard_normal((s_len - t, 1, spec.e)) * rng.uniform(0.1, 10)
            pert = run_forward(spec, w, NdArray(xp), causal=True).data
            worst = max(worst, float(np.abs(pert[:t] - base[:t]).max()))
    ok = worst <= cfg.causality_tol
    return CheckResult(
        "causality",
        ok,
        f"{cfg.causality_trials} suffix perturbations per variant: worst drift of "
        f"earlier outputs {worst:.3e}, tol {cfg.causality_tol:.0e}",
        time.perf_counter() - t0,
    )


def check_degenerate_equivalences(cfg: VerifyConfig) -> CheckResult:
    t0 = time.perf_counter()
    fails = []

    mha_spec = AttnSpec("mha", e=32, n_h=4)
    mw = mha_spec.build_weights(cfg.seed)
    gqa_full = AttnSpec("gqa", e=32, n_h=4, n_kv_heads=4)
    gw = WeightSet("gqa", gqa_full.to_params(), dict(mw.arrays))
    rng = np.random.default_rng(cfg.seed + 11)
    x = NdArray(rng.standard_normal((6, 2, 32)))
    if not np.array_equal(
        gqa_forward(x, gw, causal=True).data, mha_forward(x, mw, causal=True).data
    ):
        fails.append("full-group gqa is not bitwise mha")

    cca_spec = AttnSpec("cca", e=32, n_h=4, n_kv_heads=4, c1=2, c2=2)
    ccg_spec = AttnSpec("ccgqa", e=32, n_h=4, n_kv_heads=4, c1=2, c2=2)
    wa = cca_spec.build_weights(cfg.seed)
    wb = ccg_spec.build_weights(cfg.seed)
    if not np.array_equal(
        run_forward(cca_spec, wa, x, True).data, run_forward(ccg_spec, wb, x, True).data
    ):
        fails.append("group-1 grouped variant is not bitwise the plain one")

    b, s = 2, 24
    cca1 = eval_cost_row(AttnSpec("cca", e=32, n_h=4, n_kv_heads=4, c1=1, c2=1), b, s)
    mha1 = eval_cost_row(AttnSpec("mha", e=32, n_h=4), b, s)
    if cca1.prefill_flops != mha1.prefill_flops + cca1.conv_prefill_flops_formula:
        fails.append("unit-compression prefill row is not baseline plus conv term")

    ok = not fails
    return CheckResult(
        "degenerate_equivalence",
        ok,
        "full-group sharing ≡ baseline bitwise; group-1 grouped ≡ plain bitwise; "
        "unit compression row = baseline + conv term"
        if ok
        else "; ".join(fails),
        time.perf_counter() - t0,
    )


def check_roofline(cfg: VerifyConfig) -> CheckResult:
    t0 = time.perf_counter()
    hw = hardware_preset("h100-bf16")
    fails = []
    mla = roofline_position(AttnSpec("mla", e=16384, n_h=128, c_q=2, c_kv=4), hw)
    if not (mla["intensity"] == 256 and mla["bound"] == "memory" and mla["near_ridge"]):
        fails.append(f"128-head low-rank: {mla}")
    gqa = roofline_position(AttnSpec("gqa", e=2048, n_h=256, n_kv_heads=16), hw)
    if not (gqa["intensity"] == 16 and gqa["bound"] == "memory" and not gqa["near_ridge"]):
        fails.append(f"16x-shared gqa: {gqa}")
    ok = not fails
    return CheckResult(
        "roofline_classification",
        ok,
        f"ridge {hw.ridge:.1f} FLOPs/byte: 128-head intensity 256 memory-bound near "
        "ridge; 16x sharing intensity 16 memory-bound"
        if ok
        else "; ".join(fails),
        time.perf_counter() - t0,
    )


def check_bench_direction(cfg: VerifyConfig) -> CheckResult:
    t0 = time.perf_counter()
    specs = bench_mod.default_bench_specs()
    st = bench_mod.BenchSettings(
        s_grid=tuple(cfg.bench_s_grid),
        reps=cfg.bench_reps,
        warmup=1,
        modes=("prefill_causal",),
        seed=cfg.seed,
    )
    rows = bench_mod.run_bench(specs, st)
    s_max = max(st.s_grid)
    lat = {r["variant"]: r["median_us"] for r in rows if r["S"] == s_max}
    ok = lat["cca-4x"] < lat["mha"]
    return CheckResult(
        "bench_direction",
        ok,
        f"causal prefill at S={s_max}: cca-4x median {lat['cca-4x']:.0f}us vs mha "
        f"{lat['mha']:.0f}us (direction only)",
        time.perf_counter() - t0,
    )


ALL_CHECKS = (
    check_prefill_decode_equivalence,
    check_mla_mode_identity,
    check_gradients,
    check_cost_conformance,
    check_cost_curve_shape,
    check_causality,
    check_degenerate_equivalences,
    check_roofline,
    check_bench_direction,
)


def run_verification(cfg: VerifyConfig | None = None) -> VerifyReport:
    cfg = cfg or VerifyConfig()
    report = VerifyReport()
    for check in ALL_CHECKS:
        report.checks.append(check(cfg))
    return report
