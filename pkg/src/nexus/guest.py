"""Sandbox process entry point: attach, serve invocations, run the handler.

The synthetic handler is the same code in every mode; only the client behind
it changes (remoted frontend session vs. direct store client), which is the
API-boundary transparency the frontend promises. Startup parameters arrive
as CLI flags; NEXUS_CONTROL / NEXUS_REGION environment variables are honored
as fallbacks so alternative guest runtimes can use either form.

Keep imports here light: process start-to-attach time sits inside the
modeled restore window.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import socket
import sys
import time

from .errors import NexusError, NotFound
from .frontend import ClientSession, PutAck, digest
from .proto import InvocationEnvelope, ObjectRef
from .store import BlockingStoreClient


def deterministic_bytes(seed_key: bytes, ref: ObjectRef, length: int) -> bytes:
    """Output payload content derived from the idempotency key, so a retried
    invocation writes identical bytes."""
    block = hashlib.sha256(seed_key + str(ref).encode("utf-8")).digest()
    reps = length // len(block) + 1
    return (block * reps)[:length]


def busy_spin(compute_us: int) -> None:
    deadline = time.perf_counter() + compute_us / 1e6
    while time.perf_counter() < deadline:
        pass


def _parse_event(envelope: InvocationEnvelope) -> dict:
    try:
        event = json.loads(envelope.event_body or b"{}")
    except json.JSONDecodeError:
        event = {}
    event.setdefault("compute_us", 0)
    event.setdefault("inputs", [])
    event.setdefault("output", None)
    return event


def run_invocation(envelope: InvocationEnvelope, client, asynchronous_puts: bool) -> tuple[str, bytes, dict]:
    """Execute the synthetic function: GET declared inputs, spin, PUT the
    declared output; returns (status, payload, guest timing metrics)."""
    event = _parse_event(envelope)
    metrics: dict = {"get_wait_us": 0, "put_wait_us": 0, "exec_us": 0}
    digests = []
    t_start = time.monotonic()
    try:
        for item in event["inputs"]:
            ref = ObjectRef(item["bucket"], item["key"])
            t0 = time.monotonic()
            obj = client.get_object(ref)
            summary = digest(obj)
            metrics["get_wait_us"] += int((time.monotonic() - t0) * 1e6)
            digests.append({"ref": str(ref)} | summary)

        t0 = time.monotonic()
        busy_spin(int(event["compute_us"]))
        metrics["exec_us"] = int((time.monotonic() - t0) * 1e6)

        version = None
        delegated = False
        if event["output"]:
            out = event["output"]
            ref = ObjectRef(out["bucket"], out["key"])
            data = deterministic_bytes(envelope.idempotency_key, ref, int(out.get("size_bytes", 0)))
            t0 = time.monotonic()
            ack = client.put_object(ref, data, asynchronous_puts)
            metrics["put_wait_us"] = int((time.monotonic() - t0) * 1e6)
            if isinstance(ack, PutAck):
                delegated, version = ack.delegated, ack.version
            else:
                version = int(ack)
    except NotFound as exc:
        return "error", str(exc).encode(), _final_metrics(metrics, client, t_start)
    except NexusError as exc:
        return "error", f"{type(exc).__name__}: {exc}".encode(), _final_metrics(metrics, client, t_start)

    payload = json.dumps({
        "inputs": digests,
        "output_version": version,
        "output_delegated": delegated,
    }).encode("utf-8")
    return "ok", payload, _final_metrics(metrics, client, t_start)


def _final_metrics(metrics: dict, client, t_start: float) -> dict:
    metrics["handler_us"] = int((time.monotonic() - t_start) * 1e6)
    counters = getattr(client, "counters", None)
    if counters is not None:
        metrics["counters"] = vars(counters).copy()
    else:
        metrics["counters"] = {"get_ops": client.get_ops, "put_ops": client.put_ops}
    return metrics


class _DirectClientAdapter:
    """Direct store client with the frontend's call shape, for coupled mode."""

    def __init__(self, store_client: BlockingStoreClient):
        self._client = store_client

    def reset_counters(self):
        self._client.get_ops = 0
        self._client.put_ops = 0

    @property
    def get_ops(self):
        return self._client.get_ops

    @property
    def put_ops(self):
        return self._client.put_ops

    def get_object(self, ref: ObjectRef) -> bytes:
        return self._client.get_object(ref)

    def put_object(self, ref: ObjectRef, data, asynchronous: bool = False) -> int:
        return self._client.put_object(ref, data, asynchronous)


def serve(control: str, region: str, function: str, mode: str, store_addr: str,
          idle_timeout_s: float) -> int:
    session = ClientSession.attach(control, region or None)
    direct = None
    if mode == "coupled":
        host, port = store_addr.rsplit(":", 1)
        direct = BlockingStoreClient(host, int(port))
        client = _DirectClientAdapter(direct)
    else:
        client = session

    try:
        while True:
            try:
                envelope = session.recv_invoke(timeout=idle_timeout_s)
            except socket.timeout:
                return 0  # idle guest retires itself
            except NexusError:
                return 1  # control channel gone; the backend owns recovery
            t_recv = time.monotonic()
            if direct is not None:
                client.reset_counters()  # the remoted session resets itself
            status, payload, metrics = run_invocation(
                envelope, client, asynchronous_puts=(mode == "offloaded-async"))
            metrics["t_invoke_recv_us"] = int(t_recv * 1e6)
            metrics["t_respond_us"] = int(time.monotonic() * 1e6)
            session.respond(status, payload, metrics)
    finally:
        session.close()
        if direct is not None:
            direct.close()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="nexus-guest")
    parser.add_argument("--control", default=os.environ.get("NEXUS_CONTROL", ""))
    parser.add_argument("--region", default=os.environ.get("NEXUS_REGION", ""))
    parser.add_argument("--function", required=True)
    parser.add_argument("--mode", default="offloaded",
                        choices=["coupled", "offloaded", "offloaded-async"])
    parser.add_argument("--store", default="", help="host:port, coupled mode only")
    parser.add_argument("--idle-timeout-s", type=float, default=30.0)
    args = parser.parse_args(argv)
    if not args.control:
        parser.error("--control or NEXUS_CONTROL required")
    return serve(args.control, args.region, args.function, args.mode, args.store,
                 args.idle_timeout_s)


if __name__ == "__main__":
    sys.exit(main())
