"""Cost-model curve data: closed-form rows over a sequence-length grid.

Emits one row per (variant, S) with exact integers (no rounding at any
point) and can render the four standard panels — parameters, cache size
at the longest length, prefill FLOPs, decode FLOPs — as a self-contained
SVG.
"""

from __future__ import annotations

import io

from .costmodel import AttnSpec, eval_cost_row

DEFAULT_S_GRID = (512, 1024, 2048, 4096, 8192, 16384)

CSV_COLUMNS = ("variant", "S", "params", "kv_elements", "prefill_flops", "decode_flops")


def default_curve_specs(e: int = 2048, n_h: int = 16) -> list[AttnSpec]:
    """Comparable configurations at a shared width and query-head count:
    4x-cache variants of each family plus an 8x-cache grouped instance."""
    d = e // n_h
    return [
        AttnSpec("mha", e=e, n_h=n_h),
        AttnSpec("gqa", e=e, n_h=n_h, n_kv_heads=n_h // 4, label="gqa-4x"),
        AttnSpec("mla", e=e, n_h=n_h, c_q=2, c_kv=4, rope_dim=d // 2, label="mla-4x"),
        AttnSpec("cca", e=e, n_h=n_h, n_kv_heads=n_h, c1=4, c2=4, label="cca-4x"),
        AttnSpec(
            "ccgqa", e=e, n_h=n_h, n_kv_heads=n_h // 4, c1=2, c2=8, label="ccgqa-2x8x"
        ),
    ]


def cost_rows(specs: list[AttnSpec], s_grid, b: int = 1) -> list[dict]:
    rows = []
    for spec in specs:
        for s in s_grid:
            rep = eval_cost_row(spec, b, s)
            rows.append({
                "variant": spec.label,
                "S": s,
                "params": rep.params,
                "kv_elements": rep.kv_elements,
                "prefill_flops": rep.prefill_flops,
                "decode_flops": rep.decode_flops,
            })
    return rows


def rows_to_csv(rows: list[dict], columns=CSV_COLUMNS) -> str:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in columns))
    return "\n".join(lines) + "\n"


def render_svg(rows: list[dict]) -> str:
    """Four-panel figure over the grid; log-log for the FLOP curves."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_variant: dict[str, list[dict]] = {}
    for row in rows:
        by_variant.setdefault(row["variant"], []).append(row)
    labels = list(by_variant)
    s_max = max(row["S"] for row in rows)

    fig, axes = plt.subplots(2, 2, figsize=(11, 8))
    ax = axes[0][0]
    ax.bar(labels, [by_variant[v][0]["params"] for v in labels])
    ax.set_title("parameters")
    ax.tick_params(axis="x", rotation=30)

    ax = axes[0][1]
    ax.bar(
        labels,
        [next(r["kv_elements"] for r in by_variant[v] if r["S"] == s_max) for v in labels],
    )
    ax.set_title(f"cache elements at S={s_max}")
    ax.tick_params(axis="x", rotation=30)

    for ax, key, title in (
        (axes[1][0], "prefill_flops", "prefill FLOPs vs S"),
        (axes[1][1], "decode_flops", "decode FLOPs vs S"),
    ):
        for v in labels:
            pts = sorted((r["S"], r[key]) for r in by_variant[v])
            ax.loglog([p[0] for p in pts], [p[1] for p in pts], marker="o", label=v)
        ax.set_title(title)
        ax.set_xlabel("S")
        ax.legend(fontsize=7)

    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg")
    plt.close(fig)
    return buf.getvalue()
