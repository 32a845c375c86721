"""Shared test helpers: an in-loop store + backend stack with real guest
processes, plus envelope builders."""

from __future__ import annotations

import asyncio
import json
import shutil
import tempfile

import pytest

from nexus import proto
from nexus.backend import Backend
from nexus.config import BackendConfig, parse_config
from nexus.proto import InputHint, InvocationEnvelope, ObjectRef, new_id
from nexus.store import ObjectStore, StoreProfile, StoreService


def make_config(mode: str = "offloaded-async", functions=("fn",), **over) -> BackendConfig:
    doc = {
        "mode": mode,
        "functions": [{"name": name} for name in functions],
        "restore_model": {"base_us": 2_000, "per_page_us": 0.0, "working_set_pages": 0},
        "pool": {"warm_capacity": 4, "idle_timeout_s": 20.0},
    }
    doc.update(over)
    return parse_config(json.dumps(doc).encode())


class Stack:
    """One object store and one backend living in the test's event loop;
    sandboxes are real child processes."""

    def __init__(self, cfg: BackendConfig, latency_us: int = 0,
                 bandwidth_bps: int = 100_000_000_000):
        self.cfg = cfg
        self.store = ObjectStore(StoreProfile(one_way_latency_us=latency_us,
                                              bandwidth_bps=bandwidth_bps))
        self.service = StoreService(self.store)
        self.backend: Backend | None = None
        self.rundir = ""

    async def __aenter__(self) -> "Stack":
        self.rundir = tempfile.mkdtemp(prefix="nexus-test-")
        host, port = await self.service.start()
        self.cfg.store_host, self.cfg.store_port = host, port
        self.cfg.region_dir = self.rundir
        self.backend = Backend(self.cfg)
        await self.backend.start()
        return self

    async def __aexit__(self, *exc) -> None:
        await self.backend.stop()
        await self.service.stop()
        shutil.rmtree(self.rundir, ignore_errors=True)

    def seed(self, bucket: str, key: str, data: bytes) -> int:
        return self.store.seed(bucket, key, data)

    async def invoke(self, envelope: InvocationEnvelope) -> dict:
        body = await self.backend.handle_invocation(envelope)
        return proto.parse_ingress_response(body)


def build_envelope(function: str = "fn", inputs=(), output=None, compute_us: int = 0,
                   hinted: bool = True, idempotency_key: bytes | None = None) -> InvocationEnvelope:
    """inputs: iterable of (bucket, key, size_or_None); output: (bucket, key, size)."""
    event_inputs = [{"bucket": b, "key": k, "size_bytes": s} for b, k, s in inputs]
    event = {
        "compute_us": compute_us,
        "inputs": event_inputs,
        "output": ({"bucket": output[0], "key": output[1], "size_bytes": output[2]}
                   if output else None),
    }
    hints = tuple(InputHint(ObjectRef(b, k), s) for b, k, s in inputs) if hinted else ()
    outputs = (ObjectRef(output[0], output[1]),) if output else ()
    return InvocationEnvelope(
        invocation_id=new_id(),
        function=function,
        input_hints=hints,
        output_hints=outputs,
        event_body=json.dumps(event).encode(),
        idempotency_key=idempotency_key or new_id(),
    )


def run_async(coro, timeout: float = 120.0):
    async def wrapped():
        return await asyncio.wait_for(coro, timeout)

    return asyncio.run(wrapped())


@pytest.fixture(scope="session")
def anyio_backend():
    return "asyncio"
