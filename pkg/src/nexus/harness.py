"""Ingress-side load generator: trace replay, density sweep, fault injection.

The harness plays the cluster ingress role: it promotes I/O hints out of
trace event bodies into invocation envelopes, replays events against a
backend (or the coupled runner) on schedule without waiting for completions,
owns the retry-with-idempotency-key loop that gives the system its
at-least-once behavior under backend crashes, and reduces the responses to a
run report with per-phase breakdowns, percentiles, and slowdown.
"""

from __future__ import annotations

import asyncio
import contextlib
import json
import logging
import os
import random
import signal
import socket
import sys
import tempfile
import time
from dataclasses import dataclass, field
from typing import Optional

from . import proto, report as report_mod
from .errors import SchemaError, TransportError
from .guest import deterministic_bytes
from .proto import InputHint, InvocationEnvelope, MessageType, ObjectRef, new_id
from .store import ADMIN_COUNTERS, BlockingStoreClient

logger = logging.getLogger(__name__)

TRACE_SEED_KEY = b"trace-input"


# ---------------------------------------------------------------------------
# traces

@dataclass
class TraceEvent:
    t_ms: int
    function: str
    inputs: list[dict] = field(default_factory=list)
    compute_us: int = 0
    output: Optional[dict] = None
    hinted: bool = True

    def to_json(self) -> dict:
        return {
            "t_ms": self.t_ms,
            "function": self.function,
            "inputs": self.inputs,
            "compute_us": self.compute_us,
            "output": self.output,
            "hinted": self.hinted,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TraceEvent":
        if "function" not in doc:
            raise SchemaError("function", "missing")
        return cls(
            t_ms=int(doc.get("t_ms", 0)),
            function=doc["function"],
            inputs=list(doc.get("inputs", [])),
            compute_us=int(doc.get("compute_us", 0)),
            output=doc.get("output"),
            hinted=bool(doc.get("hinted", True)),
        )


def load_trace(path: str) -> list[TraceEvent]:
    events = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                events.append(TraceEvent.from_json(json.loads(line)))
    events.sort(key=lambda e: e.t_ms)
    return events


def save_trace(events: list[TraceEvent], path: str) -> None:
    with open(path, "w") as fh:
        for event in events:
            fh.write(json.dumps(event.to_json(), separators=(",", ":")) + "\n")


def gen_trace(functions: int, rate: float, duration_s: float, io_ratio: float,
              seed: int, *, object_kib_min: int = 64, object_kib_max: int = 1024,
              hinted_frac: float = 0.96, output_frac: float = 1.0,
              latency_us: int = 2_000, bandwidth_bps: int = 600_000_000) -> list[TraceEvent]:
    """Synthetic Poisson trace. io_ratio is the I/O share of an invocation's
    service time given the store profile, so io_ratio 0.9 is I/O-heavy;
    hinted_frac defaults to the observed fraction of functions whose inputs
    are known at invocation time."""
    if not (0 < io_ratio < 1):
        raise ValueError("io_ratio must be in (0, 1)")
    rng = random.Random(seed)
    events: list[TraceEvent] = []
    for index in range(functions):
        name = f"f{index:02d}"
        size = rng.randint(object_kib_min, object_kib_max) * 1024
        in_ref = {"bucket": "trace", "key": f"{name}/in0", "size_bytes": size}
        t = 0.0
        sequence = 0
        while True:
            t += rng.expovariate(rate)
            if t >= duration_s:
                break
            has_output = rng.random() < output_frac
            io_us = latency_us + size * 8e6 / bandwidth_bps
            if has_output:
                io_us += latency_us + size * 8e6 / bandwidth_bps
            compute_us = int(io_us * (1 - io_ratio) / io_ratio)
            output = None
            if has_output:
                output = {"bucket": "trace", "key": f"{name}/out{sequence}", "size_bytes": size}
            events.append(TraceEvent(
                t_ms=int(t * 1000),
                function=name,
                inputs=[dict(in_ref)],
                compute_us=compute_us,
                output=output,
                hinted=rng.random() < hinted_frac,
            ))
            sequence += 1
    events.sort(key=lambda e: e.t_ms)
    return events


def promote_hints(event: TraceEvent, invocation_id: bytes, idempotency_key: bytes,
                  max_hint_bytes: int = proto.DEFAULT_MAX_HINT_BYTES) -> InvocationEnvelope:
    """Lift input refs and sizes out of the event body into envelope hints
    when the event is hinted; strip them when it is not, which exercises the
    streaming fallback downstream."""
    body = json.dumps({
        "compute_us": event.compute_us,
        "inputs": event.inputs,
        "output": event.output,
    }, separators=(",", ":")).encode("utf-8")
    hints: tuple[InputHint, ...] = ()
    if event.hinted:
        built = []
        for item in event.inputs:
            size = item.get("size_bytes")
            if size is not None and size > max_hint_bytes:
                raise SchemaError("size_bytes", f"hint {size} above max {max_hint_bytes}")
            built.append(InputHint(ObjectRef(item["bucket"], item["key"]), size))
        hints = tuple(built)
    outputs: tuple[ObjectRef, ...] = ()
    if event.output:
        outputs = (ObjectRef(event.output["bucket"], event.output["key"]),)
    return InvocationEnvelope(
        invocation_id=invocation_id,
        function=event.function,
        input_hints=hints,
        output_hints=outputs,
        event_body=body,
        idempotency_key=idempotency_key,
    )


def seed_objects(events: list[TraceEvent], store: BlockingStoreClient) -> int:
    """Insert every referenced input object before replay; content is
    deterministic so tests can recompute expected digests."""
    seeded = {}
    for event in events:
        for item in event.inputs:
            ref = ObjectRef(item["bucket"], item["key"])
            size = int(item.get("size_bytes", 0))
            if str(ref) not in seeded:
                store.seed(ref, deterministic_bytes(TRACE_SEED_KEY, ref, size))
                seeded[str(ref)] = size
    return len(seeded)


# ---------------------------------------------------------------------------
# ingress client

class IngressClient:
    """Multiplexed framed client for the backend's ingress listener. On a
    connection drop every outstanding request fails fast with
    TransportError and the caller decides whether to retry the attempt."""

    def __init__(self, host: str, port: int, connect_timeout_s: float = 30.0):
        self.host = host
        self.port = port
        self.connect_timeout_s = connect_timeout_s
        self._reader: Optional[asyncio.StreamReader] = None
        self._writer: Optional[asyncio.StreamWriter] = None
        self._pending: dict[str, asyncio.Future] = {}
        self._reader_task: Optional[asyncio.Task] = None
        self._lock = asyncio.Lock()

    async def _ensure_connected(self) -> None:
        if self._writer is not None and not self._writer.is_closing():
            return
        deadline = time.monotonic() + self.connect_timeout_s
        delay = 0.05
        while True:
            try:
                self._reader, self._writer = await asyncio.open_connection(self.host, self.port)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise TransportError(
                        f"ingress {self.host}:{self.port} unreachable") from None
                await asyncio.sleep(delay)
                delay = min(delay * 1.6, 1.0)
        self._reader_task = asyncio.get_running_loop().create_task(self._read_loop())

    async def _read_loop(self) -> None:
        reader = self._reader
        try:
            while True:
                header = await reader.readexactly(4)
                length = int.from_bytes(header, "little")
                body = await reader.readexactly(length)
                msg_type, payload = body[0], body[1:]
                if msg_type == MessageType.INGRESS_RESPONSE:
                    doc = proto.parse_ingress_response(payload)
                    future = self._pending.pop(doc["invocation_id"], None)
                    if future is not None and not future.done():
                        future.set_result(doc)
                # ERROR frames for malformed invokes resolve nothing; the
                # request future times out and the caller retries
        except (asyncio.IncompleteReadError, ConnectionResetError, OSError):
            pass
        finally:
            self._fail_pending()

    def _fail_pending(self) -> None:
        if self._writer is not None:
            with contextlib.suppress(Exception):
                self._writer.close()
        self._writer = None
        self._reader = None
        for future in self._pending.values():
            if not future.done():
                future.set_exception(TransportError("ingress connection lost"))
        self._pending.clear()

    async def request(self, envelope: InvocationEnvelope, timeout_s: float = 120.0) -> dict:
        async with self._lock:
            await self._ensure_connected()
            future = asyncio.get_running_loop().create_future()
            self._pending[envelope.invocation_id.hex()] = future
            frame = proto.encode_frame(MessageType.INGRESS_INVOKE,
                                       proto.envelope_to_json(envelope))
            try:
                self._writer.write(frame)
                await self._writer.drain()
            except (ConnectionResetError, BrokenPipeError, OSError):
                self._fail_pending()
                raise TransportError("ingress send failed") from None
        try:
            return await asyncio.wait_for(future, timeout_s)
        except asyncio.TimeoutError:
            self._pending.pop(envelope.invocation_id.hex(), None)
            raise TransportError("ingress response timed out") from None

    async def close(self) -> None:
        if self._reader_task is not None:
            self._reader_task.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await self._reader_task
        self._fail_pending()


# ---------------------------------------------------------------------------
# subprocess supervision

def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@dataclass
class FaultPlan:
    """Ordered kill points consumed one crash at a time."""

    kills: list[str] = field(default_factory=list)  # point names, one per kill

    @classmethod
    def parse(cls, text: str) -> "FaultPlan":
        kills = []
        if text:
            for part in text.split(","):
                point, _, count = part.partition(":")
                point = point.strip()
                if point not in ("during-prefetch", "post-response-pre-ack"):
                    raise ValueError(f"unknown kill point {point!r}")
                kills.extend([point] * int(count or "1"))
        return cls(kills)

    def next_point(self) -> Optional[str]:
        return self.kills[0] if self.kills else None

    def consume(self) -> None:
        if self.kills:
            self.kills.pop(0)


class BackendSupervisor:
    """Launches the backend (or coupled runner) as a child process, restarts
    it when it dies, and re-arms the fault plan between lives."""

    def __init__(self, config_doc: dict, rundir: str, fault_plan: Optional[FaultPlan] = None):
        self.config_doc = config_doc
        self.rundir = rundir
        self.fault_plan = fault_plan or FaultPlan()
        self.config_path = os.path.join(rundir, "backend-config.json")
        self.proc: Optional[asyncio.subprocess.Process] = None
        self.restarts = 0
        self.kills_observed = 0
        self._watch_task: Optional[asyncio.Task] = None
        self._stopping = False

    def _write_config(self) -> None:
        doc = dict(self.config_doc)
        point = self.fault_plan.next_point()
        doc["fault"] = {"point": point or "none", "skip": 0}
        with open(self.config_path, "w") as fh:
            json.dump(doc, fh, indent=2)

    async def start(self) -> None:
        self._write_config()
        mode = self.config_doc.get("mode", "offloaded-async")
        sub = "coupled" if mode == "coupled" else "backend"
        argv = [sys.executable, "-m", "nexus.cli", sub, "--config", self.config_path]
        if sub == "backend":
            argv += ["--mode", mode]
        self.proc = await asyncio.create_subprocess_exec(
            *argv, stdout=asyncio.subprocess.DEVNULL)
        await self._wait_listening()
        self._watch_task = asyncio.get_running_loop().create_task(self._watch())

    async def _wait_listening(self) -> None:
        host = self.config_doc.get("ingress_host", "127.0.0.1")
        port = self.config_doc["ingress_port"]
        deadline = time.monotonic() + 30
        while time.monotonic() < deadline:
            if self.proc.returncode is not None:
                raise TransportError("backend exited during startup")
            try:
                _, writer = await asyncio.open_connection(host, port)
                writer.close()
                return
            except OSError:
                await asyncio.sleep(0.05)
        raise TransportError("backend never started listening")

    async def _watch(self) -> None:
        code = await self.proc.wait()
        if self._stopping:
            return
        self.kills_observed += 1
        logger.info("backend died with code %s; restarting", code)
        self.fault_plan.consume()
        self.restarts += 1
        self._write_config()
        mode = self.config_doc.get("mode", "offloaded-async")
        sub = "coupled" if mode == "coupled" else "backend"
        argv = [sys.executable, "-m", "nexus.cli", sub, "--config", self.config_path]
        if sub == "backend":
            argv += ["--mode", mode]
        self.proc = await asyncio.create_subprocess_exec(
            *argv, stdout=asyncio.subprocess.DEVNULL)
        try:
            await self._wait_listening()
        except TransportError:
            logger.error("backend failed to restart")
            return
        self._watch_task = asyncio.get_running_loop().create_task(self._watch())

    async def stop(self) -> dict:
        self._stopping = True
        if self._watch_task is not None:
            self._watch_task.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await self._watch_task
        metrics = {}
        if self.proc is not None and self.proc.returncode is None:
            self.proc.send_signal(signal.SIGTERM)
            try:
                await asyncio.wait_for(self.proc.wait(), timeout=10)
            except asyncio.TimeoutError:
                self.proc.kill()
                await self.proc.wait()
        metrics_path = self.config_doc.get("metrics_path")
        if metrics_path and os.path.exists(metrics_path):
            with open(metrics_path) as fh:
                try:
                    metrics = json.load(fh)
                except json.JSONDecodeError:
                    metrics = {}
        return metrics


class StoreProcess:
    def __init__(self, latency_us: int = 0, bandwidth_bps: int = 100_000_000_000):
        self.latency_us = latency_us
        self.bandwidth_bps = bandwidth_bps
        self.proc: Optional[asyncio.subprocess.Process] = None
        self.host = "127.0.0.1"
        self.port = 0

    async def start(self) -> tuple[str, int]:
        self.port = free_port()
        self.proc = await asyncio.create_subprocess_exec(
            sys.executable, "-m", "nexus.cli", "store",
            "--listen", f"{self.host}:{self.port}",
            "--latency-us", str(self.latency_us),
            "--bandwidth-bps", str(self.bandwidth_bps),
            stdout=asyncio.subprocess.PIPE)
        line = await asyncio.wait_for(self.proc.stdout.readline(), timeout=20)
        if b"listening" not in line:
            raise TransportError(f"store failed to start: {line!r}")
        return self.host, self.port

    async def stop(self) -> None:
        if self.proc is not None and self.proc.returncode is None:
            self.proc.send_signal(signal.SIGTERM)
            try:
                await asyncio.wait_for(self.proc.wait(), timeout=10)
            except asyncio.TimeoutError:
                self.proc.kill()
                await self.proc.wait()


# ---------------------------------------------------------------------------
# replay

@dataclass
class ReplayOptions:
    mode: str = "offloaded-async"
    store_latency_us: int = 2_000
    store_bandwidth_bps: int = 600_000_000
    store_addr: Optional[tuple[str, int]] = None  # use an external store
    backend_overrides: dict = field(default_factory=dict)
    fault_plan: str = ""
    retry_budget: int = 5
    retry_backoff_s: float = 0.25
    request_timeout_s: float = 120.0
    unloaded_probes: int = 3
    rundir: Optional[str] = None
    seed: int = 0
    time_scale: float = 1.0  # multiply trace offsets; <1 compresses the schedule


def _backend_config_doc(options: ReplayOptions, functions: list[str],
                        store_addr: tuple[str, int], rundir: str) -> dict:
    doc = {
        "mode": options.mode,
        "region_dir": os.path.join(rundir, "regions"),
        "store_host": store_addr[0],
        "store_port": store_addr[1],
        "ingress_host": "127.0.0.1",
        "ingress_port": free_port(),
        "metrics_path": os.path.join(rundir, "backend-metrics.json"),
        "functions": [{"name": name} for name in sorted(set(functions))],
    }
    for key, value in options.backend_overrides.items():
        if key == "functions":
            by_name = {fn["name"]: fn for fn in doc["functions"]}
            for patch in value:
                by_name.setdefault(patch["name"], {"name": patch["name"]}).update(patch)
            doc["functions"] = list(by_name.values())
        else:
            doc[key] = value
    return doc


async def replay_async(events: list[TraceEvent], options: ReplayOptions) -> dict:
    """Drive one full replay and return the run report document."""
    rundir = options.rundir or tempfile.mkdtemp(prefix="nexus-run-")
    os.makedirs(rundir, exist_ok=True)

    store_proc = None
    if options.store_addr is None:
        store_proc = StoreProcess(options.store_latency_us, options.store_bandwidth_bps)
        store_addr = await store_proc.start()
    else:
        store_addr = options.store_addr

    functions = sorted({e.function for e in events})
    config_doc = _backend_config_doc(options, functions, store_addr, rundir)
    supervisor = BackendSupervisor(config_doc, rundir, FaultPlan.parse(options.fault_plan))
    client = IngressClient("127.0.0.1", config_doc["ingress_port"])
    seed_client = BlockingStoreClient(*store_addr)
    try:
        await asyncio.to_thread(seed_objects, events, seed_client)
        await supervisor.start()

        unloaded = await _unloaded_phase(client, events, options)

        start = time.monotonic()
        tasks = [
            asyncio.get_running_loop().create_task(
                _run_logical(client, event, start, options))
            for event in events
        ]
        records = list(await asyncio.gather(*tasks))
        store_counters = await asyncio.to_thread(seed_client.admin, ADMIN_COUNTERS, {})
        backend_metrics = await supervisor.stop()
        counters = {
            "store": store_counters,
            "backend": backend_metrics,
            "ingress_retries": sum(max(0, r.get("attempts", 1) - 1) for r in records),
            "backend_restarts": supervisor.restarts,
            "duplicate_versions": sum(
                1 for key, version in store_counters.get("versions", {}).items()
                if key.split("/", 1)[0] == "trace" and "/out" in key and version > 1),
        }
        meta = {"seed": options.seed, "events": len(events), "rundir": rundir,
                "store_latency_us": options.store_latency_us,
                "store_bandwidth_bps": options.store_bandwidth_bps}
        return report_mod.summarize(records, unloaded, options.mode, counters, meta)
    finally:
        await client.close()
        with contextlib.suppress(Exception):
            await supervisor.stop()
        seed_client.close()
        if store_proc is not None:
            await store_proc.stop()


async def _unloaded_phase(client: IngressClient, events: list[TraceEvent],
                          options: ReplayOptions) -> dict[str, float]:
    """Warm single-invocation phase: probe each function sequentially with
    its first event, discard the first (cold) response, take the median of
    the rest."""
    if options.unloaded_probes <= 0:
        return {}
    templates: dict[str, TraceEvent] = {}
    for event in events:
        templates.setdefault(event.function, event)
    unloaded: dict[str, float] = {}
    for name, template in sorted(templates.items()):
        totals = []
        for probe in range(options.unloaded_probes + 1):
            record = await _invoke_once(client, template, options)
            if record["status"] != "ok":
                continue
            if probe == 0:
                continue
            totals.append(record["total_us"])
        if totals:
            unloaded[name] = report_mod.percentile(totals, 0.5)
    return unloaded


async def _invoke_once(client: IngressClient, event: TraceEvent,
                       options: ReplayOptions) -> dict:
    for attempt in range(1, options.retry_budget + 1):
        envelope = promote_hints(event, new_id(), new_id())
        try:
            doc = await client.request(envelope, options.request_timeout_s)
            return _record_from_response(event, doc, attempt)
        except TransportError:
            await asyncio.sleep(options.retry_backoff_s * attempt)
    return _lost_record(event, options.retry_budget)


async def _run_logical(client: IngressClient, event: TraceEvent, start: float,
                       options: ReplayOptions) -> dict:
    """One logical invocation: issue at its trace offset and retry attempts
    (fresh invocation id, same idempotency key) until a response lands."""
    due = start + event.t_ms / 1000.0 * options.time_scale
    delay = due - time.monotonic()
    if delay > 0:
        await asyncio.sleep(delay)
    idempotency_key = new_id()
    for attempt in range(1, options.retry_budget + 1):
        envelope = promote_hints(event, new_id(), idempotency_key)
        try:
            doc = await client.request(envelope, options.request_timeout_s)
            record = _record_from_response(event, doc, attempt)
            record["idempotency_key"] = idempotency_key.hex()
            return record
        except TransportError:
            await asyncio.sleep(options.retry_backoff_s * attempt)
    record = _lost_record(event, options.retry_budget)
    record["idempotency_key"] = idempotency_key.hex()
    return record


def _record_from_response(event: TraceEvent, doc: dict, attempts: int) -> dict:
    timestamps = doc.get("timestamps_us", {})
    record = {
        "function": event.function,
        "t_ms": event.t_ms,
        "hinted": event.hinted,
        "status": doc["status"],
        "attempts": attempts,
        "breakdown_us": doc["breakdown_us"],
        "total_us": int(timestamps.get("total", 0)),
        "timestamps_us": timestamps,
        "counters": doc.get("counters", {}),
        "warm": doc.get("warm", False),
        "error": doc.get("error", ""),
    }
    if doc.get("payload"):
        try:
            record["handler"] = json.loads(doc["payload"])
        except (json.JSONDecodeError, UnicodeDecodeError):
            pass
    guest = doc.get("guest")
    if guest:
        record["guest"] = guest
    return record


def _lost_record(event: TraceEvent, attempts: int) -> dict:
    return {
        "function": event.function,
        "t_ms": event.t_ms,
        "hinted": event.hinted,
        "status": "lost",
        "attempts": attempts,
        "breakdown_us": {"queue": 0, "restore": 0, "prefetch": 0, "exec": 0, "writeback": 0},
        "total_us": 0,
        "timestamps_us": {},
        "counters": {},
        "warm": False,
        "error": "no response within retry budget",
    }


def replay(events: list[TraceEvent], options: ReplayOptions) -> dict:
    return asyncio.run(replay_async(events, options))


# ---------------------------------------------------------------------------
# density sweep

@dataclass
class SweepTemplate:
    modes: list[str] = field(default_factory=lambda: ["coupled", "offloaded", "offloaded-async"])
    start_functions: int = 2
    step_functions: int = 2
    max_functions: int = 8
    rate: float = 2.0
    duration_s: float = 6.0
    io_ratio: float = 0.5
    seed: int = 1
    slo_multiplier: float = 5.0
    object_kib_min: int = 64
    object_kib_max: int = 256
    store_latency_us: int = 2_000
    store_bandwidth_bps: int = 600_000_000
    backend_overrides: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, doc: dict) -> "SweepTemplate":
        known = {f for f in cls.__dataclass_fields__}  # type: ignore[attr-defined]
        unknown = set(doc) - known
        if unknown:
            raise SchemaError(sorted(unknown)[0], "unknown sweep template key")
        return cls(**doc)


def density_sweep(template: SweepTemplate) -> dict:
    """Scale the deployed-function count per mode until the geometric-mean
    slowdown violates the SLO; returns the last passing count per mode."""
    results: dict[str, int] = {}
    steps: dict[str, list[dict]] = {}
    for mode in template.modes:
        last_passing = 0
        mode_steps = []
        count = template.start_functions
        while count <= template.max_functions:
            events = gen_trace(
                functions=count, rate=template.rate, duration_s=template.duration_s,
                io_ratio=template.io_ratio, seed=template.seed,
                object_kib_min=template.object_kib_min,
                object_kib_max=template.object_kib_max,
                latency_us=template.store_latency_us,
                bandwidth_bps=template.store_bandwidth_bps)
            options = ReplayOptions(
                mode=mode,
                store_latency_us=template.store_latency_us,
                store_bandwidth_bps=template.store_bandwidth_bps,
                backend_overrides=dict(template.backend_overrides),
                seed=template.seed)
            run = replay(events, options)
            slowdown = run["geomean_slowdown"]
            passing = 0 < slowdown <= template.slo_multiplier and run["lost"] == 0
            mode_steps.append({
                "functions": count,
                "geomean_slowdown": slowdown,
                "invocations": run["invocations"],
                "errors": run["errors"],
                "pass": passing,
            })
            if not passing:
                break
            last_passing = count
            count += template.step_functions
        results[mode] = last_passing
        steps[mode] = mode_steps
    return {
        "density": results,
        "steps": steps,
        "slo_multiplier": template.slo_multiplier,
        "template": vars(template).copy(),
    }
