"""Desk-scale wall-clock benchmarks of the numpy execution paths.

Reports median and p90 latency per (variant, S, mode) for the causal and
full prefill forwards and a step-by-step decode loop, alongside the
deterministic matmul+conv FLOP count of one run. BLAS is pinned to a
single thread during timing to stabilize the medians; the cell loop can
optionally fan out across worker threads.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from .costmodel import AttnSpec
from .errors import ConfigError
from .ndcore import NdArray, instrument_flops
from .runners import run_decode_loop, run_forward

DEFAULT_BENCH_S_GRID = (256, 512, 1024)

MODES = ("prefill_causal", "prefill_full", "decode")

CSV_COLUMNS = ("variant", "S", "mode", "median_us", "p90_us", "flops")


@dataclass(frozen=True)
class BenchSettings:
    s_grid: tuple = DEFAULT_BENCH_S_GRID
    batch: int = 1
    warmup: int = 1
    reps: int = 5
    modes: tuple = MODES
    seed: int = 0
    threads: int = 1
    pin_blas: bool = True

    def __post_init__(self):
        if not self.s_grid or min(self.s_grid) < 1:
            raise ConfigError("sequence grid must be nonempty and positive")
        if self.reps < 1 or self.warmup < 0:
            raise ConfigError("reps must be >= 1 and warmup >= 0")
        unknown = set(self.modes) - set(MODES)
        if unknown:
            raise ConfigError(f"unknown bench modes {sorted(unknown)}")


def _blas_guard(enabled: bool):
    if not enabled:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except ImportError:
        return nullcontext()


def _cell(spec: AttnSpec, s: int, mode: str, st: BenchSettings) -> dict:
    w = spec.build_weights(st.seed)
    rng = np.random.default_rng(st.seed + s)
    x = NdArray(rng.standard_normal((s, st.batch, spec.e)))

    if mode == "prefill_causal":
        run = lambda: run_forward(spec, w, x, causal=True)  # noqa: E731
    elif mode == "prefill_full":
        run = lambda: run_forward(spec, w, x, causal=False)  # noqa: E731
    else:
        run = lambda: run_decode_loop(spec, w, x)  # noqa: E731

    flops = instrument_flops(run)
    for _ in range(st.warmup):
        run()
    times = []
    for _ in range(st.reps):
        t0 = time.perf_counter()
        run()
        times.append((time.perf_counter() - t0) * 1e6)
    return {
        "variant": spec.label,
        "S": s,
        "mode": mode,
        "median_us": float(np.median(times)),
        "p90_us": float(np.percentile(times, 90)),
        "flops": flops,
    }


def run_bench(specs: list[AttnSpec], st: BenchSettings) -> list[dict]:
    cells = [(spec, s, mode) for spec in specs for s in st.s_grid for mode in st.modes]
    with _blas_guard(st.pin_blas):
        if st.threads > 1:
            with ThreadPoolExecutor(max_workers=st.threads) as pool:
                rows = list(pool.map(lambda c: _cell(*c, st), cells))
        else:
            rows = [_cell(spec, s, mode, st) for spec, s, mode in cells]
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def default_bench_specs(e: int = 512, n_h: int = 8) -> list[AttnSpec]:
    """Matched-width pair used for the direction check: the full-width
    baseline and the 4x-compressed latent variant."""
    return [
        AttnSpec("mha", e=e, n_h=n_h),
        AttnSpec("cca", e=e, n_h=n_h, n_kv_heads=n_h, c1=4, c2=4, label="cca-4x"),
    ]
