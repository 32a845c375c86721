"""Run reports: percentile math, JSON/CSV serialization, rendered figures.

The CSV is the flat per-invocation export for external tooling; figures are
rendered next to it on the report path (matplotlib imports stay lazy so the
daemons never pay for them).
"""

from __future__ import annotations

import csv
import json
import math
import os
from typing import Optional

CSV_FIELDS = [
    "index", "function", "t_ms", "status", "attempts", "warm", "mode",
    "queue_us", "restore_us", "prefetch_us", "exec_us", "writeback_us",
    "total_us", "error",
]


def percentile(values: list[float], fraction: float) -> float:
    """Nearest-rank-with-interpolation percentile; tolerant of tiny samples."""
    if not values:
        return 0.0
    ordered = sorted(values)
    if len(ordered) == 1:
        return float(ordered[0])
    rank = fraction * (len(ordered) - 1)
    low = int(math.floor(rank))
    high = min(low + 1, len(ordered) - 1)
    weight = rank - low
    return ordered[low] * (1 - weight) + ordered[high] * weight


def geometric_mean(values: list[float]) -> float:
    positives = [v for v in values if v > 0]
    if not positives:
        return 0.0
    return math.exp(sum(math.log(v) for v in positives) / len(positives))


def summarize(records: list[dict], unloaded: dict[str, float], mode: str,
              counters: Optional[dict] = None, meta: Optional[dict] = None) -> dict:
    """Assemble the run report document from per-invocation records."""
    per_function: dict[str, dict] = {}
    by_fn: dict[str, list[dict]] = {}
    for record in records:
        by_fn.setdefault(record["function"], []).append(record)
    slowdowns = []
    for name, rows in sorted(by_fn.items()):
        ok_totals = [r["total_us"] for r in rows if r["status"] == "ok"]
        entry = {
            "count": len(rows),
            "ok": sum(1 for r in rows if r["status"] == "ok"),
            "p50_us": percentile(ok_totals, 0.50),
            "p99_us": percentile(ok_totals, 0.99),
            "mean_io_us": (sum(r["breakdown_us"]["prefetch"] + r["breakdown_us"]["writeback"]
                               for r in rows) / len(rows)) if rows else 0.0,
            "unloaded_median_us": unloaded.get(name, 0.0),
        }
        if entry["unloaded_median_us"] > 0 and ok_totals:
            entry["slowdown"] = entry["p99_us"] / entry["unloaded_median_us"]
            slowdowns.append(entry["slowdown"])
        else:
            entry["slowdown"] = 0.0
        per_function[name] = entry

    io_means = [r["breakdown_us"]["prefetch"] + r["breakdown_us"]["writeback"]
                for r in records]
    report = {
        "mode": mode,
        "invocations": len(records),
        "ok": sum(1 for r in records if r["status"] == "ok"),
        "errors": sum(1 for r in records if r["status"] != "ok"),
        "lost": sum(1 for r in records if r["status"] == "lost"),
        "retried": sum(1 for r in records if r.get("attempts", 1) > 1),
        "geomean_slowdown": geometric_mean(slowdowns),
        "mean_critical_io_us": sum(io_means) / len(io_means) if io_means else 0.0,
        "per_function": per_function,
        "unloaded_median_us": unloaded,
        "counters": counters or {},
        "records": records,
    }
    if meta:
        report["meta"] = meta
    return report


def write_report(report: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)


def write_csv(report: dict, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for i, record in enumerate(report["records"]):
            breakdown = record["breakdown_us"]
            writer.writerow({
                "index": i,
                "function": record["function"],
                "t_ms": record.get("t_ms", 0),
                "status": record["status"],
                "attempts": record.get("attempts", 1),
                "warm": record.get("warm", False),
                "mode": report["mode"],
                "queue_us": breakdown["queue"],
                "restore_us": breakdown["restore"],
                "prefetch_us": breakdown["prefetch"],
                "exec_us": breakdown["exec"],
                "writeback_us": breakdown["writeback"],
                "total_us": record["total_us"],
                "error": record.get("error", ""),
            })


_PHASES = ["queue", "restore", "prefetch", "exec", "writeback"]


def render_figures(reports: list[dict], outdir: str, stem: str = "run") -> list[str]:
    """Render breakdown and latency figures for one or more runs (typically
    one per mode) and return the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(outdir, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    modes = [r["mode"] for r in reports]
    bottoms = [0.0] * len(reports)
    for phase in _PHASES:
        means = []
        for report in reports:
            rows = report["records"]
            ok = [r for r in rows if r["status"] == "ok"] or rows
            means.append(sum(r["breakdown_us"][phase] for r in ok) / len(ok) / 1e3 if ok else 0.0)
        ax.bar(modes, means, bottom=bottoms, label=phase)
        bottoms = [b + m for b, m in zip(bottoms, means)]
    ax.set_ylabel("mean time per invocation (ms)")
    ax.set_title("critical-path breakdown by mode")
    ax.legend()
    path = os.path.join(outdir, f"{stem}_breakdown.png")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    for report in reports:
        totals = sorted(r["total_us"] / 1e3 for r in report["records"] if r["status"] == "ok")
        if not totals:
            continue
        fractions = [(i + 1) / len(totals) for i in range(len(totals))]
        ax.plot(totals, fractions, label=report["mode"])
    ax.set_xlabel("invocation latency (ms)")
    ax.set_ylabel("CDF")
    ax.set_title("end-to-end latency")
    ax.legend()
    path = os.path.join(outdir, f"{stem}_latency.png")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)
    return written


def render_sweep_figure(sweep: dict, outdir: str, stem: str = "sweep") -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(outdir, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    for mode, steps in sweep["steps"].items():
        xs = [s["functions"] for s in steps]
        ys = [s["geomean_slowdown"] for s in steps]
        ax.plot(xs, ys, marker="o", label=mode)
    ax.axhline(sweep["slo_multiplier"], linestyle="--", color="grey",
               label=f"SLO x{sweep['slo_multiplier']}")
    ax.set_xlabel("deployed functions")
    ax.set_ylabel("geomean slowdown")
    ax.set_title("density sweep")
    ax.legend()
    path = os.path.join(outdir, f"{stem}.png")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path
