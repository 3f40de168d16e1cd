"""Pydantic models for the service API and the on-disk run configuration.

The CLI config file is the same shape as the request bodies, with a
``schema_version`` pin. Unknown fields are rejected everywhere so typos
fail loudly instead of silently running defaults.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from .. import bench as bench_mod
from .. import curves as curves_mod
from ..costmodel import AttnSpec, HardwareSpec, hardware_preset
from ..verify import VerifyConfig


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class VariantModel(StrictModel):
    variant: Literal["mha", "gqa", "mla", "cca", "ccgqa"]
    e: int = Field(ge=1)
    n_h: int = Field(ge=1)
    label: str = ""
    n_kv_heads: int = Field(default=0, ge=0)
    c_q: int = Field(default=1, ge=1)
    c_kv: int = Field(default=1, ge=1)
    rope_dim: int = Field(default=0, ge=0)
    c1: int = Field(default=1, ge=1)
    c2: int = Field(default=1, ge=1)
    k_seq: int = Field(default=4, ge=1)
    k_ch: int = Field(default=4, ge=1)

    def to_spec(self) -> AttnSpec:
        return AttnSpec(**self.model_dump())


class HardwareModel(StrictModel):
    preset: Optional[str] = "h100-bf16"
    peak_flops_per_s: Optional[float] = Field(default=None, gt=0)
    mem_bandwidth_bytes_per_s: Optional[float] = Field(default=None, gt=0)

    def to_hardware(self) -> HardwareSpec:
        if self.peak_flops_per_s is not None and self.mem_bandwidth_bytes_per_s is not None:
            return HardwareSpec(
                name=self.preset or "custom",
                peak_flops_per_s=self.peak_flops_per_s,
                mem_bandwidth_bytes_per_s=self.mem_bandwidth_bytes_per_s,
            )
        return hardware_preset(self.preset or "h100-bf16")


class VerifySettingsModel(StrictModel):
    equivalence_seeds: int = Field(default=5, ge=1)
    equivalence_batches: list[int] = [1, 2]
    equivalence_lengths: list[int] = [1, 2, 13, 64]
    identity_seeds: int = Field(default=10, ge=1)
    gradient_seeds: int = Field(default=3, ge=1)
    conformance_specs: int = Field(default=20, ge=1)
    causality_trials: int = Field(default=200, ge=1)
    bench_s_grid: list[int] = [256, 512]
    bench_reps: int = Field(default=3, ge=1)
    fault_injection: Optional[str] = None

    def to_config(self, seed: int) -> VerifyConfig:
        return VerifyConfig(
            seed=seed,
            equivalence_seeds=self.equivalence_seeds,
            equivalence_batches=tuple(self.equivalence_batches),
            equivalence_lengths=tuple(self.equivalence_lengths),
            identity_seeds=self.identity_seeds,
            gradient_seeds=self.gradient_seeds,
            conformance_specs=self.conformance_specs,
            causality_trials=self.causality_trials,
            bench_s_grid=tuple(self.bench_s_grid),
            bench_reps=self.bench_reps,
            fault_injection=self.fault_injection,
        )


class BenchSettingsModel(StrictModel):
    s_grid: list[int] = list(bench_mod.DEFAULT_BENCH_S_GRID)
    batch: int = Field(default=1, ge=1)
    warmup: int = Field(default=1, ge=0)
    reps: int = Field(default=5, ge=1)
    modes: list[str] = list(bench_mod.MODES)
    variants: Optional[list[VariantModel]] = None

    def to_settings(self, seed: int, threads: int) -> bench_mod.BenchSettings:
        return bench_mod.BenchSettings(
            s_grid=tuple(self.s_grid),
            batch=self.batch,
            warmup=self.warmup,
            reps=self.reps,
            modes=tuple(self.modes),
            seed=seed,
            threads=threads,
        )

    def specs(self) -> list[AttnSpec]:
        if self.variants:
            return [v.to_spec() for v in self.variants]
        return bench_mod.default_bench_specs()


class ConfigFile(StrictModel):
    """Top-level run configuration (also the CLI ``--config`` schema)."""

    schema_version: Literal[1] = 1
    seed: int = 0
    s_grid: list[int] = list(curves_mod.DEFAULT_S_GRID)
    batch: int = Field(default=1, ge=1)
    element_bytes: int = Field(default=2, ge=1)
    plot: bool = False
    variants: Optional[list[VariantModel]] = None
    bench: BenchSettingsModel = BenchSettingsModel()
    verify: VerifySettingsModel = VerifySettingsModel()
    hardware: HardwareModel = HardwareModel()

    def curve_specs(self) -> list[AttnSpec]:
        if self.variants:
            return [v.to_spec() for v in self.variants]
        return curves_mod.default_curve_specs()


# ---------------------------------------------------------------------------
# Requests


class VerifyRequest(StrictModel):
    config: ConfigFile = ConfigFile()
    f32: bool = False


class CostCurvesRequest(StrictModel):
    config: ConfigFile = ConfigFile()


class BenchRequest(StrictModel):
    config: ConfigFile = ConfigFile()
    threads: int = Field(default=1, ge=1)
    f32: bool = False


class RooflineRequest(StrictModel):
    config: ConfigFile = ConfigFile()


class CostReportRequest(StrictModel):
    spec: VariantModel
    b: int = Field(default=1, ge=1)
    s: int = Field(default=1, ge=1)
    # also run the real pipeline under a FLOP counter and attach the
    # measured terms; executes the numerics, so keep (b, s, e) desk-scale
    measure: bool = False
    seed: int = 0


# ---------------------------------------------------------------------------
# Responses


class HealthResponse(BaseModel):
    status: str
    version: str


class CheckModel(BaseModel):
    name: str
    passed: bool
    detail: str
    duration_s: float


class VerifyResponse(BaseModel):
    passed: bool
    exit_code: int
    checks: list[CheckModel]


class CostRowModel(BaseModel):
    variant: str
    S: int
    params: int
    kv_elements: int
    prefill_flops: int
    decode_flops: int


class CostCurvesResponse(BaseModel):
    rows: list[CostRowModel]
    csv: str
    svg: Optional[str] = None


class BenchRowModel(BaseModel):
    variant: str
    S: int
    mode: str
    median_us: float
    p90_us: float
    flops: int


class BenchResponse(BaseModel):
    rows: list[BenchRowModel]
    csv: str


class RooflineEntryModel(BaseModel):
    variant: str
    label: str
    intensity: float
    ridge: float
    bound: Literal["memory", "compute"]
    near_ridge: bool


class RooflineResponse(BaseModel):
    hardware: str
    ridge: float
    entries: list[RooflineEntryModel]


class CostReportResponse(BaseModel):
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
    notes: list[str]
    measured: Optional[dict[str, int]] = None
