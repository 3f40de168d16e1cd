"""Service API: request/response schemas, error mapping, CSV exactness."""

import numpy as np
import pytest

from latentattn.client import ServiceClient, ServiceError
from latentattn.costmodel import AttnSpec, eval_cost_row


FAST_VERIFY = {
    "equivalence_seeds": 1,
    "equivalence_batches": [1],
    "equivalence_lengths": [1, 5],
    "identity_seeds": 2,
    "gradient_seeds": 1,
    "conformance_specs": 5,
    "causality_trials": 10,
    "bench_s_grid": [128, 256],
    "bench_reps": 1,
}


@pytest.fixture(scope="module")
def client():
    return ServiceClient()  # in-process ASGI


def test_health(client):
    resp = client.get("/health")
    assert resp["status"] == "ok"


def test_cost_report_matches_core(client):
    resp = client.post(
        "/cost-report",
        {"spec": {"variant": "ccgqa", "e": 2048, "n_h": 16, "n_kv_heads": 4,
                  "c1": 2, "c2": 8}, "b": 1, "s": 4096},
    )
    rep = eval_cost_row(
        AttnSpec("ccgqa", e=2048, n_h=16, n_kv_heads=4, c1=2, c2=8), 1, 4096
    )
    assert resp["prefill_flops"] == rep.prefill_flops
    assert resp["kv_elements"] == rep.kv_elements
    assert resp["conv_params_built"] != resp["conv_params_formula"]
    assert resp["notes"]
    assert resp["measured"] is None


def test_cost_report_with_measurement(client):
    resp = client.post(
        "/cost-report",
        {"spec": {"variant": "gqa", "e": 32, "n_h": 4, "n_kv_heads": 2},
         "b": 1, "s": 6, "measure": True},
    )
    m = resp["measured"]
    assert m["prefill_projection_flops"] == resp["prefill_projection_flops"]
    assert m["decode_attention_flops"] == resp["decode_attention_flops"]
    assert m["kv_elements"] == resp["kv_elements"]


def test_cost_curves_rows_and_exact_cells(client):
    grid = [512, 2048]
    resp = client.post("/cost-curves", {"config": {"s_grid": grid}})
    assert len(resp["rows"]) == 5 * len(grid)
    # every CSV cell is the exact closed-form integer
    lines = resp["csv"].strip().splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        cells = dict(zip(header, line.split(",")))
        row = next(
            r for r in resp["rows"]
            if r["variant"] == cells["variant"] and r["S"] == int(cells["S"])
        )
        for col in ("params", "kv_elements", "prefill_flops", "decode_flops"):
            assert int(cells[col]) == row[col]


def test_cost_curves_svg_toggle(client):
    resp = client.post("/cost-curves", {"config": {"s_grid": [512], "plot": True}})
    assert resp["svg"] and resp["svg"].lstrip().startswith("<?xml")
    resp = client.post("/cost-curves", {"config": {"s_grid": [512]}})
    assert resp["svg"] is None


def test_verify_fast_config_passes(client):
    resp = client.post("/verify", {"config": {"verify": FAST_VERIFY}})
    assert resp["passed"] is True
    assert resp["exit_code"] == 0
    assert len(resp["checks"]) == 9


def test_verify_fault_injection_fails_named_check(client):
    cfg = dict(FAST_VERIFY, fault_injection="prefill_decode_equivalence")
    resp = client.post("/verify", {"config": {"verify": cfg}})
    assert resp["passed"] is False
    assert resp["exit_code"] == 1
    failing = [c["name"] for c in resp["checks"] if not c["passed"]]
    assert "prefill_decode_equivalence" in failing


def test_bench_schema_and_determinism(client):
    cfg = {"config": {"seed": 7, "bench": {"s_grid": [32, 64], "reps": 1, "warmup": 0,
                                            "modes": ["prefill_causal", "decode"]}}}
    a = client.post("/bench", cfg)
    b = client.post("/bench", cfg)
    assert len(a["rows"]) == 2 * 2 * 2
    flops_a = [(r["variant"], r["S"], r["mode"], r["flops"]) for r in a["rows"]]
    flops_b = [(r["variant"], r["S"], r["mode"], r["flops"]) for r in b["rows"]]
    assert flops_a == flops_b  # counters deterministic; latency may vary
    assert a["csv"].splitlines()[0] == "variant,S,mode,median_us,p90_us,flops"


def test_bench_f32_mode_restores_default(client):
    import latentattn.ndcore as ndcore

    cfg = {"config": {"bench": {"s_grid": [16], "reps": 1, "warmup": 0,
                                 "modes": ["prefill_causal"]}}, "f32": True}
    client.post("/bench", cfg)
    assert ndcore.get_default_dtype() == np.float64


def test_roofline_custom_hardware(client):
    resp = client.post(
        "/roofline",
        {"config": {"hardware": {"preset": "toy", "peak_flops_per_s": 8.0,
                                 "mem_bandwidth_bytes_per_s": 1.0}}},
    )
    assert resp["ridge"] == 8.0
    gqa = next(e for e in resp["entries"] if e["label"] == "gqa-4x")
    assert gqa["bound"] == "memory"  # intensity 4 < ridge 8


def test_roofline_unknown_preset_is_config_error(client):
    with pytest.raises(ServiceError, match="unknown hardware preset"):
        client.post("/roofline", {"config": {"hardware": {"preset": "b200"}}})


def test_invalid_dimensions_rejected(client):
    with pytest.raises(ServiceError, match="not divisible"):
        client.post("/cost-report", {"spec": {"variant": "mha", "e": 10, "n_h": 3}})


def test_unknown_config_field_rejected(client):
    with pytest.raises(ServiceError, match="422"):
        client.post("/cost-curves", {"config": {"not_a_field": 1}})
