"""Manual end-to-end smoke: store + backend subprocesses, one replay."""

import asyncio
import json
import logging
import sys

from nexus.harness import ReplayOptions, TraceEvent, replay_async

logging.basicConfig(level="INFO")


async def main(mode: str) -> None:
    events = [
        TraceEvent(t_ms=0, function="demo",
                   inputs=[{"bucket": "trace", "key": "demo/in0", "size_bytes": 65536}],
                   compute_us=20_000,
                   output={"bucket": "trace", "key": "demo/out0", "size_bytes": 32768},
                   hinted=True),
        TraceEvent(t_ms=100, function="demo",
                   inputs=[{"bucket": "trace", "key": "demo/in0", "size_bytes": 65536}],
                   compute_us=20_000,
                   output={"bucket": "trace", "key": "demo/out1", "size_bytes": 32768},
                   hinted=False),
    ]
    options = ReplayOptions(mode=mode, store_latency_us=5_000, unloaded_probes=2)
    run = await replay_async(events, options)
    for rec in run["records"]:
        print(json.dumps({k: rec[k] for k in ("function", "status", "warm", "breakdown_us",
                                              "total_us", "error")}, indent=1))
    print("counters:", json.dumps(run["counters"].get("store", {}).get("versions", {})))
    print("geomean slowdown:", run["geomean_slowdown"])
    assert run["errors"] == 0 and run["lost"] == 0, "smoke run had failures"


if __name__ == "__main__":
    asyncio.run(main(sys.argv[1] if len(sys.argv) > 1 else "offloaded-async"))
