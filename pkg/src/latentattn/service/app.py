"""FastAPI service exposing the verification, cost-model, and bench runs.

The heavy lifting lives in the core package; endpoints validate, call
through, and shape the response. Runs that flip the global float mode
hold a process lock so concurrent requests cannot race the dtype switch.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, bench as bench_mod, curves as curves_mod, ndcore
from ..costmodel import eval_cost_row, measure_costs, roofline_position
from ..errors import LatentAttnError
from ..verify import run_verification
from . import schemas

_dtype_lock = threading.Lock()


@contextmanager
def _float_mode(f32: bool):
    with _dtype_lock:
        previous = ndcore.get_default_dtype()
        ndcore.set_default_dtype(np.float32 if f32 else np.float64)
        try:
            yield
        finally:
            ndcore.set_default_dtype(previous)


def create_app() -> FastAPI:
    app = FastAPI(title="latent-attn", version=__version__)

    @app.exception_handler(LatentAttnError)
    async def domain_error(request: Request, exc: LatentAttnError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/verify", response_model=schemas.VerifyResponse)
    def verify(req: schemas.VerifyRequest):
        cfg = req.config.verify.to_config(req.config.seed)
        with _float_mode(req.f32):
            report = run_verification(cfg)
        return schemas.VerifyResponse(
            passed=report.passed,
            exit_code=0 if report.passed else 1,
            checks=[schemas.CheckModel(**c.to_dict()) for c in report.checks],
        )

    @app.post("/cost-curves", response_model=schemas.CostCurvesResponse)
    def cost_curves(req: schemas.CostCurvesRequest):
        cfg = req.config
        rows = curves_mod.cost_rows(cfg.curve_specs(), cfg.s_grid, b=cfg.batch)
        svg = curves_mod.render_svg(rows) if cfg.plot else None
        return schemas.CostCurvesResponse(
            rows=[schemas.CostRowModel(**r) for r in rows],
            csv=curves_mod.rows_to_csv(rows),
            svg=svg,
        )

    @app.post("/bench", response_model=schemas.BenchResponse)
    def bench(req: schemas.BenchRequest):
        settings = req.config.bench.to_settings(req.config.seed, req.threads)
        specs = req.config.bench.specs()
        with _float_mode(req.f32):
            rows = bench_mod.run_bench(specs, settings)
        return schemas.BenchResponse(
            rows=[schemas.BenchRowModel(**r) for r in rows],
            csv=bench_mod.rows_to_csv(rows),
        )

    @app.post("/roofline", response_model=schemas.RooflineResponse)
    def roofline(req: schemas.RooflineRequest):
        cfg = req.config
        hw = cfg.hardware.to_hardware()
        entries = [roofline_position(s, hw) for s in cfg.curve_specs()]
        return schemas.RooflineResponse(
            hardware=hw.name,
            ridge=hw.ridge,
            entries=[schemas.RooflineEntryModel(**e) for e in entries],
        )

    @app.post("/cost-report", response_model=schemas.CostReportResponse)
    def cost_report(req: schemas.CostReportRequest):
        spec = req.spec.to_spec()
        if req.measure:
            rep = measure_costs(spec, req.b, req.s, req.seed)
        else:
            rep = eval_cost_row(spec, req.b, req.s)
        return schemas.CostReportResponse(
            variant=rep.variant,
            label=rep.label,
            b=rep.b,
            s=rep.s,
            params=rep.params,
            kv_elements=rep.kv_elements,
            prefill_flops=rep.prefill_flops,
            decode_flops=rep.decode_flops,
            prefill_projection_flops=rep.prefill_projection_flops,
            prefill_attention_flops=rep.prefill_attention_flops,
            decode_projection_flops=rep.decode_projection_flops,
            decode_attention_flops=rep.decode_attention_flops,
            conv_params_formula=rep.conv_params_formula,
            conv_params_built=rep.conv_params_built,
            conv_prefill_flops_formula=rep.conv_prefill_flops_formula,
            conv_decode_flops_formula=rep.conv_decode_flops_formula,
            notes=list(rep.notes),
            measured=rep.measured,
        )

    return app


app = create_app()
