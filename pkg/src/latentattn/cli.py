"""Command-line front end: a thin client over the service API.

Commands run against an in-process app by default (no daemon needed) or a
remote instance via ``--server``. Exit codes: 0 success, 1 verification
check failure, 2 configuration or transport error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from pydantic import ValidationError

from .client import ServiceClient
from .errors import ConfigError, LatentAttnError
from .service import schemas


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latent-attn",
        description="Compressed-latent attention toolkit: verification suites, "
        "desk-scale benchmarks, cost-model curves, roofline reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="JSON run config")
        p.add_argument("--out", type=Path, default=Path("latent-attn-out"),
                       help="output directory (created if missing)")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--plot", action="store_true", help="also emit SVG charts")
        p.add_argument("--threads", type=int, default=1,
                       help="fan independent bench cells across worker threads")
        p.add_argument("--f32", action="store_true",
                       help="run numerics in float32 (latency harness mode)")
        p.add_argument("--server", default=None,
                       help="base URL of a running service (default: in-process)")

    for name, fn in (
        ("verify", cmd_verify),
        ("bench", cmd_bench),
        ("cost-curves", cmd_cost_curves),
        ("roofline", cmd_roofline),
    ):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(func=fn)

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(func=cmd_serve)
    return parser


def load_config(args) -> schemas.ConfigFile:
    if args.config is None:
        cfg = schemas.ConfigFile()
    else:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        try:
            cfg = schemas.ConfigFile.model_validate_json(text)
        except ValidationError as exc:
            raise ConfigError(f"invalid config {args.config}:\n{exc}") from exc
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.plot:
        updates["plot"] = True
    return cfg.model_copy(update=updates) if updates else cfg


def out_dir(args) -> Path:
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_verify(args) -> int:
    cfg = load_config(args)
    client = ServiceClient(args.server)
    req = schemas.VerifyRequest(config=cfg, f32=args.f32)
    resp = client.post("/verify", req.model_dump(mode="json"))
    path = out_dir(args) / "verify_report.json"
    path.write_text(json.dumps(resp, indent=2) + "\n")
    for check in resp["checks"]:
        mark = "PASS" if check["passed"] else "FAIL"
        print(f"{mark} {check['name']:28s} {check['detail']}")
    if resp["passed"]:
        print(f"all checks passed; report at {path}")
    else:
        failing = [c["name"] for c in resp["checks"] if not c["passed"]]
        print(f"FAILED checks: {', '.join(failing)}; report at {path}")
    return int(resp["exit_code"])


def cmd_cost_curves(args) -> int:
    cfg = load_config(args)
    client = ServiceClient(args.server)
    req = schemas.CostCurvesRequest(config=cfg)
    resp = client.post("/cost-curves", req.model_dump(mode="json"))
    out = out_dir(args)
    csv_path = out / "cost_curves.csv"
    csv_path.write_text(resp["csv"])
    print(f"{len(resp['rows'])} rows -> {csv_path}")
    if resp.get("svg"):
        svg_path = out / "cost_curves.svg"
        svg_path.write_text(resp["svg"])
        print(f"charts -> {svg_path}")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args)
    client = ServiceClient(args.server)
    req = schemas.BenchRequest(config=cfg, threads=args.threads, f32=args.f32)
    resp = client.post("/bench", req.model_dump(mode="json"))
    out = out_dir(args)
    csv_path = out / "bench.csv"
    csv_path.write_text(resp["csv"])
    print(f"{len(resp['rows'])} cells -> {csv_path}")
    return 0


def cmd_roofline(args) -> int:
    cfg = load_config(args)
    client = ServiceClient(args.server)
    req = schemas.RooflineRequest(config=cfg)
    resp = client.post("/roofline", req.model_dump(mode="json"))
    out = out_dir(args)
    path = out / "roofline.json"
    path.write_text(json.dumps(resp, indent=2) + "\n")
    print(f"hardware {resp['hardware']} ridge {resp['ridge']:.1f} FLOPs/byte")
    for e in resp["entries"]:
        near = " (near ridge)" if e["near_ridge"] else ""
        print(f"  {e['label']:14s} intensity {e['intensity']:8.1f}  {e['bound']}-bound{near}")
    print(f"report -> {path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("latentattn.service.app:app", host=args.host, port=args.port)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (LatentAttnError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
