"""Umbrella command line: store / backend / coupled / harness subcommands.

    nexus store   --listen 127.0.0.1:9301 --latency-us 2000 --bandwidth-bps 600000000
    nexus backend --config cfg.json --listen-ingress 127.0.0.1:9302 \
                  --store 127.0.0.1:9301 --region-dir /tmp/regions \
                  --mode offloaded-async
    nexus coupled --config cfg.json           # the coupled-baseline runner
    nexus harness replay --trace t.jsonl --mode offloaded-async --report out.json
    nexus harness sweep --template sweep.json --slo 5.0
    nexus harness gen-trace --functions 4 --rate 2 --io-ratio 0.5 --seed 7 --out t.jsonl
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys


def _addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def _cmd_store(args) -> int:
    from .store import run_service

    host, port = _addr(args.listen)
    run_service(host, port, args.latency_us, args.bandwidth_bps)
    return 0


def _backend_overrides(args) -> dict:
    overrides: dict = {}
    if args.listen_ingress:
        host, port = _addr(args.listen_ingress)
        overrides["ingress_host"] = host
        overrides["ingress_port"] = port
    if args.store:
        host, port = _addr(args.store)
        overrides["store_host"] = host
        overrides["store_port"] = port
    if args.region_dir:
        overrides["region_dir"] = args.region_dir
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if args.metrics_out:
        overrides["metrics_path"] = args.metrics_out
    return overrides


def _cmd_backend(args) -> int:
    from .backend import run_backend

    run_backend(args.config, _backend_overrides(args))
    return 0


def _cmd_coupled(args) -> int:
    from .backend import run_backend

    overrides = _backend_overrides(args)
    overrides["mode"] = "coupled"
    run_backend(args.config, overrides)
    return 0


def _cmd_gen_trace(args) -> int:
    from .harness import gen_trace, save_trace

    events = gen_trace(
        functions=args.functions, rate=args.rate, duration_s=args.duration_s,
        io_ratio=args.io_ratio, seed=args.seed,
        object_kib_min=args.object_kib_min, object_kib_max=args.object_kib_max,
        hinted_frac=args.hinted_frac,
        latency_us=args.latency_us, bandwidth_bps=args.bandwidth_bps)
    save_trace(events, args.out)
    print(f"wrote {len(events)} events to {args.out}")
    return 0


def _cmd_replay(args) -> int:
    from . import report as report_mod
    from .harness import ReplayOptions, load_trace, replay

    events = load_trace(args.trace)
    options = ReplayOptions(
        mode=args.mode,
        store_latency_us=args.latency_us,
        store_bandwidth_bps=args.bandwidth_bps,
        fault_plan=args.fault or "",
        seed=args.seed,
    )
    if args.store:
        options.store_addr = _addr(args.store)
    run = replay(events, options)
    report_mod.write_report(run, args.report)
    csv_path = os.path.splitext(args.report)[0] + ".csv"
    report_mod.write_csv(run, csv_path)
    written = [args.report, csv_path]
    if not args.no_figures:
        outdir = os.path.dirname(os.path.abspath(args.report)) or "."
        stem = os.path.splitext(os.path.basename(args.report))[0]
        written += report_mod.render_figures([run], outdir, stem)
    print(json.dumps({
        "mode": run["mode"],
        "invocations": run["invocations"],
        "ok": run["ok"],
        "errors": run["errors"],
        "lost": run["lost"],
        "geomean_slowdown": round(run["geomean_slowdown"], 3),
        "mean_critical_io_us": round(run["mean_critical_io_us"], 1),
        "written": written,
    }, indent=2))
    return 1 if run["lost"] else 0


def _cmd_sweep(args) -> int:
    from . import report as report_mod
    from .harness import SweepTemplate, density_sweep

    with open(args.template) as fh:
        doc = json.load(fh)
    if args.slo is not None:
        doc["slo_multiplier"] = args.slo
    template = SweepTemplate.from_json(doc)
    sweep = density_sweep(template)
    with open(args.report, "w") as fh:
        json.dump(sweep, fh, indent=2)
    written = [args.report]
    if not args.no_figures:
        outdir = os.path.dirname(os.path.abspath(args.report)) or "."
        stem = os.path.splitext(os.path.basename(args.report))[0]
        written.append(report_mod.render_sweep_figure(sweep, outdir, stem))
    print(json.dumps({"density": sweep["density"], "written": written}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nexus")
    sub = parser.add_subparsers(dest="command", required=True)

    p_store = sub.add_parser("store", help="in-memory object store service")
    p_store.add_argument("--listen", default="127.0.0.1:0")
    p_store.add_argument("--latency-us", type=int, default=0)
    p_store.add_argument("--bandwidth-bps", type=int, default=100_000_000_000)
    p_store.set_defaults(func=_cmd_store)

    def backend_common(p):
        p.add_argument("--config", required=True)
        p.add_argument("--listen-ingress", default="")
        p.add_argument("--store", default="")
        p.add_argument("--region-dir", default="")
        p.add_argument("--metrics-out", default="")

    p_backend = sub.add_parser("backend", help="offloading host daemon")
    backend_common(p_backend)
    p_backend.add_argument("--mode", choices=["offloaded", "offloaded-async"], default="")
    p_backend.set_defaults(func=_cmd_backend)

    p_coupled = sub.add_parser("coupled", help="coupled-baseline runner")
    backend_common(p_coupled)
    p_coupled.set_defaults(func=_cmd_coupled)

    p_harness = sub.add_parser("harness", help="ingress load generator")
    hsub = p_harness.add_subparsers(dest="harness_command", required=True)

    p_gen = hsub.add_parser("gen-trace", help="generate a synthetic trace")
    p_gen.add_argument("--functions", type=int, required=True)
    p_gen.add_argument("--rate", type=float, required=True, help="events/s per function")
    p_gen.add_argument("--io-ratio", type=float, required=True,
                       help="I/O share of service time, in (0,1)")
    p_gen.add_argument("--seed", type=int, required=True)
    p_gen.add_argument("--duration-s", type=float, default=10.0)
    p_gen.add_argument("--object-kib-min", type=int, default=64)
    p_gen.add_argument("--object-kib-max", type=int, default=1024)
    p_gen.add_argument("--hinted-frac", type=float, default=0.96)
    p_gen.add_argument("--latency-us", type=int, default=2_000)
    p_gen.add_argument("--bandwidth-bps", type=int, default=600_000_000)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=_cmd_gen_trace)

    p_replay = hsub.add_parser("replay", help="replay a trace against a backend")
    p_replay.add_argument("--trace", required=True)
    p_replay.add_argument("--mode", choices=["coupled", "offloaded", "offloaded-async"],
                          required=True)
    p_replay.add_argument("--report", required=True)
    p_replay.add_argument("--store", default="", help="external store host:port")
    p_replay.add_argument("--latency-us", type=int, default=2_000)
    p_replay.add_argument("--bandwidth-bps", type=int, default=600_000_000)
    p_replay.add_argument("--fault", default="",
                          help="kill plan, e.g. during-prefetch:1,post-response-pre-ack:2")
    p_replay.add_argument("--seed", type=int, default=0)
    p_replay.add_argument("--no-figures", action="store_true")
    p_replay.set_defaults(func=_cmd_replay)

    p_sweep = hsub.add_parser("sweep", help="density sweep across modes")
    p_sweep.add_argument("--template", required=True)
    p_sweep.add_argument("--slo", type=float, default=None)
    p_sweep.add_argument("--report", default="sweep.json")
    p_sweep.add_argument("--no-figures", action="store_true")
    p_sweep.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("NEXUS_LOG", "WARNING"))
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
