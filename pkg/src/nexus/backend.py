"""The trusted host daemon.

Terminates ingress invocations, provisions sandboxes in parallel with input
prefetch, serves remoted GET/PUT over the shared-memory data plane, defers
acknowledged writes off the sandbox's critical path while gating the ingress
response on their completion, enforces per-function rate limits, and holds
the per-function credentials that never cross into a sandbox.

The same daemon class also runs the coupled baseline (see coupled mode in
CONFIG.md): no prefetch, no remoting, the guest talks to the store directly,
and the response relays as soon as the handler finishes, which reproduces
the strictly serial restore-fetch-compute-write lifecycle.

One logical handler task serves each sandbox channel plus one per ingress
connection; writeback completion runs concurrently with sandbox lifecycles.
Operations on distinct invocations never serialize against each other.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import signal
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import Optional

from . import proto
from .config import BackendConfig, FunctionConfig, load_config
from .errors import (
    IllegalState,
    InjectedFailure,
    NotFound,
    ProvisionFailed,
    RegionFull,
    SchemaError,
    UnknownFunction,
)
from .proto import (
    ErrorCode,
    InputHint,
    InvocationEnvelope,
    MessageType,
    ObjectRef,
    PutKind,
    PutPhase,
    Status,
    TransferMode,
)
from .ratelimit import RateLimiterSet
from .sandbox import SandboxManager, SandboxRecord, SandboxState, now_us
from .shmem import SlotGrant
from .store import AsyncStorePool

logger = logging.getLogger(__name__)

RING_POLL_S = 0.0002
STAGING_BYTES = 256 * 1024

FAULT_DURING_PREFETCH = "during-prefetch"
FAULT_POST_RESPONSE = "post-response-pre-ack"


class PrefetchState:
    FETCHING = "Fetching"
    FILLED = "Filled"
    FAILED = "Failed"


@dataclass
class PrefetchRecord:
    hint: InputHint
    state: str = PrefetchState.FETCHING
    grant: Optional[object] = None   # slot-resident payload (fast path)
    data: Optional[bytes] = None     # host-buffered payload awaiting a region
    error: Optional[str] = None
    done: asyncio.Event = field(default_factory=asyncio.Event)


class PendingState:
    QUEUED = "Queued"
    IN_FLIGHT = "InFlight"
    ACKED = "Acked"
    FAILED = "Failed"


@dataclass
class PendingWrite:
    invocation_id: bytes
    idempotency_key: bytes
    ref: ObjectRef
    grant: Optional[object] = None   # slot-backed payload, pinned until done
    data: Optional[bytes] = None     # ring-path payload buffered in host memory
    state: str = PendingState.QUEUED
    attempts: int = 0
    acked_at_us: int = 0


class Invocation:
    """Per-attempt state: timestamps, prefetch table, response buffer."""

    def __init__(self, envelope: InvocationEnvelope, fn: FunctionConfig):
        self.envelope = envelope
        self.fn = fn
        self.ts: dict[str, int] = {"recv": now_us()}
        self.prefetch: dict[str, PrefetchRecord] = {}
        self.pending_count = 0
        self.pending_failed: Optional[str] = None
        self.pending_writes: list[PendingWrite] = []
        self.last_ack_us = 0
        self.gate = asyncio.Event()
        self.fn_response: Optional[tuple[Status, bytes, dict]] = None
        self.fn_response_event = asyncio.Event()
        self.outcome = "Held"
        self.sandbox: Optional[SandboxRecord] = None
        self.input_grants: list = []
        self.open_puts: dict[int, dict] = {}
        self.counters: dict[str, int] = {}
        self.peak_ring_bytes = 0

    def bump(self, name: str, n: int = 1) -> None:
        self.counters[name] = self.counters.get(name, 0) + n

    def write_done(self, ok: bool, error: str = "", when_us: int = 0) -> None:
        self.pending_count -= 1
        if not ok and self.pending_failed is None:
            self.pending_failed = error or "write failed"
        self.last_ack_us = max(self.last_ack_us, when_us or now_us())
        if self.pending_count <= 0:
            self.gate.set()


class Metrics:
    def __init__(self):
        self.c: dict[str, int] = {}

    def bump(self, name: str, n: int = 1) -> None:
        self.c[name] = self.c.get(name, 0) + n

    def snapshot(self) -> dict:
        return dict(self.c)


class Backend:
    def __init__(self, cfg: BackendConfig, config_path: Optional[str] = None):
        if not cfg.region_dir:
            raise ValueError("region_dir must be configured")
        self.cfg = cfg
        self.config_path = config_path
        self.coupled = cfg.mode == "coupled"
        store_addr = f"{cfg.store_host}:{cfg.store_port}"
        self.manager = SandboxManager(cfg, cfg.region_dir, cfg.mode,
                                      store_addr if self.coupled else "")
        self.store_pool = AsyncStorePool(cfg.store_host, cfg.store_port)
        self.limiters = RateLimiterSet()
        for fn in cfg.functions:
            self.limiters.configure(fn.name, fn.clients, fn.rate_limit_bps)
        self.metrics = Metrics()
        self.active: dict[int, Invocation] = {}  # sandbox_id -> invocation
        self.fault_hits: dict[str, int] = {}
        self._capture = None
        if cfg.debug.capture_frames:
            self._capture = open(cfg.debug.capture_frames, "ab")
        self._servers: list[asyncio.AbstractServer] = []
        self._stopping = asyncio.Event()
        self.ingress_port = cfg.ingress_port

    # -- credentials -------------------------------------------------------

    def resolve_credentials(self, function: str) -> str:
        """Backend-internal only: the token never enters a protocol frame
        bound for a sandbox."""
        fn = self.cfg.function(function)
        if fn is None:
            raise UnknownFunction(function)
        self.metrics.bump(f"credential_resolutions.{function}")
        return fn.credentials_token

    def reload_config(self) -> None:
        if not self.config_path:
            return
        fresh = load_config(self.config_path)
        self.cfg.functions = fresh.functions
        for fn in fresh.functions:
            self.limiters.configure(fn.name, fn.clients, fn.rate_limit_bps)
        self.metrics.bump("config_reloads")
        logger.info("configuration reloaded")

    # -- fault injection -----------------------------------------------------

    def maybe_crash(self, point: str) -> None:
        if self.cfg.fault.point != point:
            return
        self.fault_hits[point] = self.fault_hits.get(point, 0) + 1
        if self.fault_hits[point] > self.cfg.fault.skip:
            logger.warning("fault injection: aborting at %s", point)
            os._exit(70)

    # -- serving ---------------------------------------------------------

    async def start(self) -> tuple[str, int]:
        self.manager.clean_stale()
        guest_server = await asyncio.start_unix_server(
            self._serve_guest, path=self.manager.control_path)
        ingress_server = await asyncio.start_server(
            self._serve_ingress, self.cfg.ingress_host, self.cfg.ingress_port)
        self.ingress_port = ingress_server.sockets[0].getsockname()[1]
        self._servers = [guest_server, ingress_server]
        logger.info("backend up: mode=%s ingress=%s:%d region_dir=%s",
                    self.cfg.mode, self.cfg.ingress_host, self.ingress_port,
                    self.cfg.region_dir)
        return self.cfg.ingress_host, self.ingress_port

    async def stop(self) -> None:
        self._stopping.set()
        for server in self._servers:
            server.close()
            await server.wait_closed()
        await self.manager.shutdown()
        self.store_pool.close()
        if self._capture:
            self._capture.close()
        self.dump_metrics()

    def dump_metrics(self) -> None:
        if not self.cfg.metrics_path:
            return
        doc = self.metrics.snapshot()
        doc["sandbox"] = self.manager.counters()
        with open(self.cfg.metrics_path, "w") as fh:
            json.dump(doc, fh, indent=2)

    async def serve_forever(self) -> None:
        await self.start()
        loop = asyncio.get_running_loop()
        loop.add_signal_handler(signal.SIGTERM, self._stopping.set)
        loop.add_signal_handler(signal.SIGINT, self._stopping.set)
        loop.add_signal_handler(signal.SIGHUP, self.reload_config)
        print(f"backend listening on {self.cfg.ingress_host}:{self.ingress_port}", flush=True)
        await self._stopping.wait()
        for server in self._servers:
            server.close()
            await server.wait_closed()
        self._servers = []
        await self.manager.shutdown()
        self.dump_metrics()

    # -- guest channels ------------------------------------------------------

    async def _serve_guest(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        sock = writer.get_extra_info("socket")
        creds = sock.getsockopt(socket.SOL_SOCKET, socket.SO_PEERCRED, struct.calcsize("3i"))
        pid, _uid, _gid = struct.unpack("3i", creds)
        channel = GuestChannel(reader, writer, self._capture)
        record = self.manager.bind_channel(pid, channel)
        if record is None:
            # an orphan from a previous backend life: tell it to retire
            await channel.send(MessageType.ERROR,
                               proto.encode_error(ErrorCode.UNKNOWN_SANDBOX, "unknown sandbox"))
            channel.close()
            return
        logger.debug("sandbox %d attached (pid %d)", record.sandbox_id, pid)
        try:
            while True:
                msg_type, body = await channel.recv()
                if not proto.is_sandbox_scope(int(msg_type)):
                    await channel.send(MessageType.ERROR,
                                       proto.encode_error(ErrorCode.SCOPE, "ingress-scope frame"))
                    continue
                if not isinstance(msg_type, MessageType):
                    await channel.send(MessageType.ERROR,
                                       proto.encode_error(ErrorCode.UNKNOWN_MSG_TYPE,
                                                          f"type 0x{int(msg_type):02x}"))
                    continue
                asyncio.get_running_loop().create_task(
                    self._dispatch_guest(record, channel, msg_type, body))
        except (asyncio.IncompleteReadError, ConnectionResetError, proto.TruncatedFrame):
            pass
        finally:
            channel.close()
            invocation = self.active.get(record.sandbox_id)
            if invocation is not None and invocation.fn_response is None:
                invocation.fn_response = (Status.ERROR, b"sandbox terminated", {})
                invocation.fn_response_event.set()
            if record.channel is channel:
                record.channel = None

    async def _dispatch_guest(self, record: SandboxRecord, channel: "GuestChannel",
                              msg_type: MessageType, body: bytes) -> None:
        invocation = self.active.get(record.sandbox_id)
        try:
            if msg_type == MessageType.FN_RESPONSE:
                self._on_fn_response(record, body)
            elif invocation is None:
                await channel.send(MessageType.ERROR,
                                   proto.encode_error(ErrorCode.ILLEGAL_STATE,
                                                      "no active invocation"))
            elif msg_type == MessageType.GET_REQ:
                await self._handle_get(record, invocation, channel, body)
            elif msg_type == MessageType.PUT_REQ:
                await self._handle_put(record, invocation, channel, body)
            elif msg_type == MessageType.STREAM_OPEN:
                await self._handle_put_stream(record, invocation, channel, body)
            elif msg_type == MessageType.STREAM_CLOSE:
                pass  # consumed by the put-stream handler; stray closes are benign
            else:
                await channel.send(MessageType.ERROR,
                                   proto.encode_error(ErrorCode.UNKNOWN_MSG_TYPE, msg_type.name))
        except (ConnectionResetError, BrokenPipeError):
            pass
        except SchemaError as exc:
            await channel.send(MessageType.ERROR,
                               proto.encode_error(ErrorCode.MALFORMED, str(exc)))
        except Exception:
            logger.exception("guest dispatch failed (sandbox %d)", record.sandbox_id)

    def _on_fn_response(self, record: SandboxRecord, body: bytes) -> None:
        invocation_id, status, payload, metrics = proto.decode_fn_response(body)
        invocation = self.active.get(record.sandbox_id)
        if invocation is None or invocation.envelope.invocation_id != invocation_id:
            self.metrics.bump("stale_fn_responses")
            return
        invocation.ts["fnresp_recv"] = now_us()
        invocation.fn_response = (status, payload, metrics)
        invocation.fn_response_event.set()

    # -- ingress ---------------------------------------------------------

    async def _serve_ingress(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        lock = asyncio.Lock()
        try:
            while True:
                msg_type, body = await _recv_frame(reader)
                if msg_type == MessageType.INGRESS_INVOKE:
                    asyncio.get_running_loop().create_task(
                        self._handle_ingress_invoke(body, writer, lock))
                elif proto.is_sandbox_scope(int(msg_type)):
                    await _send_frame(writer, lock, MessageType.ERROR,
                                      proto.encode_error(ErrorCode.SCOPE, "sandbox-scope frame"))
                else:
                    await _send_frame(writer, lock, MessageType.ERROR,
                                      proto.encode_error(ErrorCode.UNKNOWN_MSG_TYPE,
                                                         f"type 0x{int(msg_type):02x}"))
        except (asyncio.IncompleteReadError, ConnectionResetError, proto.TruncatedFrame,
                proto.OversizeFrame):
            pass
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionResetError, BrokenPipeError):
                pass

    async def _handle_ingress_invoke(self, body: bytes, writer: asyncio.StreamWriter,
                                     lock: asyncio.Lock) -> None:
        try:
            envelope = proto.parse_envelope(body, self.cfg.region.max_object_bytes)
        except SchemaError as exc:
            await _send_frame(writer, lock, MessageType.ERROR,
                              proto.encode_error(ErrorCode.MALFORMED, str(exc)))
            return
        self.metrics.bump("invocations")
        try:
            response = await self.handle_invocation(envelope)
        except Exception as exc:
            logger.exception("invocation %s failed", envelope.invocation_id.hex())
            response = proto.ingress_response_body(
                envelope.invocation_id, "error", _zero_breakdown(),
                error=f"{type(exc).__name__}: {exc}")
        try:
            await _send_frame(writer, lock, MessageType.INGRESS_RESPONSE, response)
        except (ConnectionResetError, BrokenPipeError):
            self.metrics.bump("responses_undeliverable")

    # -- invocation lifecycle ---------------------------------------------

    async def handle_invocation(self, envelope: InvocationEnvelope) -> bytes:
        """Runs one invocation attempt end to end and returns the
        INGRESS_RESPONSE body; exactly one response is produced per attempt."""
        fn = self.cfg.function(envelope.function)
        if fn is None:
            self.metrics.bump("unknown_function")
            return proto.ingress_response_body(
                envelope.invocation_id, "error", _zero_breakdown(),
                error=f"UnknownFunction: {envelope.function}")
        invocation = Invocation(envelope, fn)
        hints = () if self.coupled else envelope.input_hints

        # provisioning and prefetch start together at ingress termination;
        # prefetched bytes land in the sandbox's region when one exists and
        # in host memory otherwise (placed into a slot at GET time)
        loop = asyncio.get_running_loop()
        assign_task = loop.create_task(self.manager.assign(envelope.function, hints))
        prefetch_tasks = []
        if hints:
            self.resolve_credentials(envelope.function)
            invocation.ts["prefetch_start"] = now_us()
            seen = set()
            for hint in hints:
                name = str(hint.ref)
                if name in seen:
                    continue  # hints form a set keyed by ref
                seen.add(name)
                rec = PrefetchRecord(hint=hint)
                invocation.prefetch[name] = rec
                prefetch_tasks.append(loop.create_task(
                    self._prefetch_one(invocation, rec)))

        try:
            record = await assign_task
        except Exception as exc:
            for task in prefetch_tasks:
                task.cancel()
            self.metrics.bump("responses_error")
            invocation.ts["release"] = now_us()
            return proto.ingress_response_body(
                envelope.invocation_id, "error", _zero_breakdown(),
                error=f"ProvisionFailed: {exc}")
        invocation.ts["assigned"] = now_us()
        invocation.sandbox = record
        self.active[record.sandbox_id] = invocation

        try:
            await record.ready_event.wait()
            if record.state is not SandboxState.READY:
                raise ProvisionFailed(f"sandbox for {envelope.function} failed to provision")
            invocation.ts["ready"] = now_us()

            if prefetch_tasks:
                done_states = {r.state for r in invocation.prefetch.values()}
                if PrefetchState.FAILED in done_states:
                    raise ProvisionFailed(_first_prefetch_error(invocation))

            self.manager.mark_busy(record)
            invocation.ts["invoke_sent"] = now_us()
            await record.channel.send(MessageType.INVOKE, proto.encode_invoke(envelope))

            await invocation.fn_response_event.wait()
            status, payload, guest_metrics = invocation.fn_response

            # early release: the sandbox returns to service without waiting
            # for writeback acknowledgments
            self.active.pop(record.sandbox_id, None)
            self.manager.release(record)
            invocation.ts["sandbox_released"] = now_us()
            self.metrics.bump("early_releases" if invocation.pending_count else "releases")

            if invocation.pending_count > 0:
                self.maybe_crash(FAULT_POST_RESPONSE)
                await invocation.gate.wait()
            invocation.ts["release"] = now_us()

            for grant in invocation.input_grants:
                if record.region is not None:
                    record.region.release_grant(grant)

            if invocation.pending_failed is not None and status == Status.OK:
                status = Status.ERROR
                payload = f"writeback failed: {invocation.pending_failed}".encode()
            invocation.outcome = "ReleasedOk" if status == Status.OK else "ReleasedError"
            self.metrics.bump("responses_ok" if status == Status.OK else "responses_error")
            return self._response(invocation, record, status, payload, guest_metrics)
        except asyncio.CancelledError:
            for task in prefetch_tasks:
                task.cancel()
            self.active.pop(record.sandbox_id, None)
            self._cancel_sandbox(record)
            raise
        except Exception as exc:
            for task in prefetch_tasks:
                task.cancel()
            self.active.pop(record.sandbox_id, None)
            self._cancel_sandbox(record)
            self.metrics.bump("responses_error")
            invocation.ts["release"] = now_us()
            label = type(exc).__name__ if not isinstance(exc, ProvisionFailed) else "ProvisionFailed"
            return proto.ingress_response_body(
                envelope.invocation_id, "error",
                self._breakdown(invocation, record, {}),
                error=f"{label}: {exc}", extra=self._extras(invocation, record))

    def _cancel_sandbox(self, record: SandboxRecord) -> None:
        if record.state in (SandboxState.READY, SandboxState.BUSY,
                            SandboxState.RESTORING):
            try:
                self.manager.abort(record)
            except IllegalState:
                pass

    def _response(self, invocation: Invocation, record: SandboxRecord,
                  status: Status, payload: bytes, guest_metrics: dict) -> bytes:
        label = "ok" if status == Status.OK else "error"
        error = None if status == Status.OK else (payload.decode("utf-8", "replace") or "handler error")
        return proto.ingress_response_body(
            invocation.envelope.invocation_id, label,
            self._breakdown(invocation, record, guest_metrics),
            error=error,
            payload=payload if status == Status.OK else b"",
            extra=self._extras(invocation, record, guest_metrics),
        )

    def _breakdown(self, invocation: Invocation, record: SandboxRecord,
                   guest_metrics: dict) -> dict:
        ts = invocation.ts
        queue = max(ts.get("assigned", ts["recv"]) - ts["recv"], 0)
        if record.warm_hit:
            restore = 0
        else:
            restore = max(ts.get("ready", ts.get("assigned", ts["recv"])) - ts.get("assigned", ts["recv"]), 0)
        return {
            "queue": queue,
            "restore": restore,
            "prefetch": int(guest_metrics.get("get_wait_us", 0)),
            "exec": int(guest_metrics.get("exec_us", 0)),
            "writeback": int(guest_metrics.get("put_wait_us", 0)),
        }

    def _extras(self, invocation: Invocation, record: SandboxRecord,
                guest_metrics: Optional[dict] = None) -> dict:
        ts = dict(invocation.ts)
        ts["total"] = ts.get("release", now_us()) - ts["recv"]
        counters = dict(invocation.counters)
        counters["pending_writes"] = len(invocation.pending_writes)
        counters["last_ack_us"] = invocation.last_ack_us
        counters["peak_ring_bytes"] = invocation.peak_ring_bytes
        if record.region is not None:
            counters["peak_slot_bytes"] = record.region.peak_slot_bytes
            counters["region_bytes_written"] = record.region.bytes_written
        extras = {
            "timestamps_us": ts,
            "counters": counters,
            "warm": record.warm_hit,
            "sandbox_id": record.sandbox_id,
            "mode": self.cfg.mode,
        }
        if guest_metrics:
            extras["guest"] = guest_metrics
        return extras

    # -- prefetch ----------------------------------------------------------

    async def _prefetch_one(self, invocation: Invocation, rec: PrefetchRecord) -> None:
        """Fetch one hinted input through the rate limiter, sizing by the
        store's response header; a hint that disagrees with the true size
        ticks a mismatch counter (silent truncation would corrupt data).

        When the invocation's sandbox region already exists and has room,
        the payload streams straight into a slot (zero copy). Before a
        region exists (provisioning still queued or restoring) the payload
        buffers host-side and is placed into a slot when the handler asks
        for it."""
        ref = rec.hint.ref
        conn = self.store_pool.acquire()
        dirty = False
        try:
            status, length = await conn.get_header(ref)
            self.maybe_crash(FAULT_DURING_PREFETCH)
            if status != 0:
                rec.state = PrefetchState.FAILED
                rec.error = f"NotFound: {ref}"
                self.metrics.bump("prefetch_notfound")
                return
            if rec.hint.size_bytes is not None and rec.hint.size_bytes != length:
                invocation.bump("hint_mismatches")
                self.metrics.bump("hint_mismatches")
            await self.limiters.acquire(invocation.fn.name, invocation.fn.clients[0], length)
            record = invocation.sandbox
            region = record.region if record is not None else None
            grant = None
            if region is not None:
                try:
                    grant = region.grant_slot(length)
                except RegionFull:
                    invocation.bump("prefetch_region_full")
                    self.metrics.bump("prefetch_region_full")
            if grant is not None:
                view = region.view(grant.offset, length)
                await conn.recv_payload_into(view)
                view.release()
                region.count_written(length)
                checksum = region.checksum(grant) if self.cfg.debug.integrity else 0
                rec.grant = SlotGrant(grant.region_id, grant.offset, grant.length, checksum)
                invocation.input_grants.append(rec.grant)
            else:
                rec.data = await conn.recv_payload(length)
                self.metrics.bump("prefetch_buffered")
            rec.state = PrefetchState.FILLED
            self.metrics.bump("prefetch_filled")
        except (OSError, EOFError) as exc:
            dirty = True
            rec.state = PrefetchState.FAILED
            rec.error = f"store unreachable: {exc}"
            self.metrics.bump("prefetch_store_errors")
        finally:
            self.store_pool.release(conn, dirty=dirty)
            invocation.ts["prefetch_end"] = now_us()
            rec.done.set()

    # -- remoted GET ---------------------------------------------------------

    async def _handle_get(self, record: SandboxRecord, invocation: Invocation,
                          channel: "GuestChannel", body: bytes) -> None:
        request_id, ref = proto.decode_get_req(body)
        rec = invocation.prefetch.get(str(ref))
        if rec is not None:
            await rec.done.wait()
            if rec.state == PrefetchState.FILLED:
                invocation.bump("get_prefetch_hits")
                self.metrics.bump("get_prefetch_hits")
                if rec.grant is None and not await self._place_buffered(
                        record, invocation, channel, request_id, rec):
                    return
                await channel.send(MessageType.GET_RESP, proto.encode_get_resp(
                    request_id, Status.OK, TransferMode.SLOT,
                    rec.grant.offset, rec.grant.length))
                return
            if rec.error and rec.error.startswith("NotFound"):
                await channel.send(MessageType.GET_RESP, proto.encode_get_resp(
                    request_id, Status.NOT_FOUND, TransferMode.SLOT, 0, 0))
                return
            # fall through to a synchronous fetch on any other failure
        await self._sync_get(record, invocation, channel, request_id, ref)

    async def _place_buffered(self, record: SandboxRecord, invocation: Invocation,
                              channel: "GuestChannel", request_id: int,
                              rec: PrefetchRecord) -> bool:
        """Move a host-buffered prefetched payload into the region: into a
        slot when one fits (True: caller sends the SLOT response), else out
        through the downstream ring (False: fully handled here)."""
        data = rec.data
        region = record.region
        try:
            grant = region.grant_slot(len(data))
        except RegionFull:
            grant = None
        if grant is not None:
            region.write(grant.offset, data)
            checksum = region.checksum(grant) if self.cfg.debug.integrity else 0
            rec.grant = SlotGrant(grant.region_id, grant.offset, grant.length, checksum)
            rec.data = None
            invocation.input_grants.append(rec.grant)
            return True
        invocation.bump("ring_fallbacks")
        self.metrics.bump("ring_fallbacks")
        await channel.send(MessageType.GET_RESP, proto.encode_get_resp(
            request_id, Status.OK, TransferMode.RING, 0, len(data)))
        await channel.send(MessageType.STREAM_OPEN,
                           proto.encode_stream_open(request_id, len(data)))
        ring = region.down_ring
        sent = 0
        view = memoryview(data)
        while sent < len(data):
            n = ring.write(view[sent:sent + ring.capacity])
            if n == 0:
                await asyncio.sleep(RING_POLL_S)
                continue
            sent += n
            invocation.peak_ring_bytes = max(invocation.peak_ring_bytes, ring.used())
        await channel.send(MessageType.STREAM_CLOSE,
                           proto.encode_stream_close(request_id, Status.OK, len(data)))
        return False

    async def _sync_get(self, record: SandboxRecord, invocation: Invocation,
                        channel: "GuestChannel", request_id: int, ref: ObjectRef) -> None:
        self.resolve_credentials(invocation.fn.name)
        conn = self.store_pool.acquire()
        dirty = False
        try:
            status, length = await conn.get_header(ref)
            if status != 0:
                await channel.send(MessageType.GET_RESP, proto.encode_get_resp(
                    request_id, Status.NOT_FOUND, TransferMode.SLOT, 0, 0))
                self.metrics.bump("get_notfound")
                return
            await self.limiters.acquire(invocation.fn.name, invocation.fn.clients[0], length)
            region = record.region
            grant = None
            try:
                grant = region.grant_slot(length)
            except RegionFull:
                invocation.bump("ring_fallbacks")
                self.metrics.bump("ring_fallbacks")
            if grant is not None:
                view = region.view(grant.offset, length)
                await conn.recv_payload_into(view)
                view.release()
                region.count_written(length)
                invocation.input_grants.append(grant)
                invocation.bump("get_sync_slot")
                self.metrics.bump("get_sync_slot")
                await channel.send(MessageType.GET_RESP, proto.encode_get_resp(
                    request_id, Status.OK, TransferMode.SLOT, grant.offset, grant.length))
                return
            # streaming fallback through the downstream ring
            await channel.send(MessageType.GET_RESP, proto.encode_get_resp(
                request_id, Status.OK, TransferMode.RING, 0, length))
            await channel.send(MessageType.STREAM_OPEN,
                               proto.encode_stream_open(request_id, length))
            await self._pump_down(record, invocation, conn, length)
            await channel.send(MessageType.STREAM_CLOSE,
                               proto.encode_stream_close(request_id, Status.OK, length))
            invocation.bump("get_ring_streams")
            self.metrics.bump("get_ring_streams")
        except (OSError, EOFError) as exc:
            dirty = True
            logger.warning("sync GET %s failed: %s", ref, exc)
            try:
                await channel.send(MessageType.GET_RESP, proto.encode_get_resp(
                    request_id, Status.ERROR, TransferMode.SLOT, 0, 0))
            except (ConnectionResetError, BrokenPipeError):
                pass
        finally:
            self.store_pool.release(conn, dirty=dirty)

    async def _pump_down(self, record: SandboxRecord, invocation: Invocation,
                         conn, length: int) -> None:
        ring = record.region.down_ring
        staging = bytearray(min(STAGING_BYTES, ring.capacity))
        remaining = length
        while remaining:
            n = min(remaining, len(staging))
            view = memoryview(staging)[:n]
            await conn.recv_payload_into(view)
            written = 0
            while written < n:
                w = ring.write(view[written:])
                if w == 0:
                    await asyncio.sleep(RING_POLL_S)
                    continue
                written += w
                invocation.peak_ring_bytes = max(invocation.peak_ring_bytes, ring.used())
            remaining -= n

    # -- remoted PUT ---------------------------------------------------------

    async def _handle_put(self, record: SandboxRecord, invocation: Invocation,
                          channel: "GuestChannel", body: bytes) -> None:
        req = proto.decode_put_req(body)
        if req.phase == PutPhase.ALLOC:
            state = {"ref": req.ref, "asynchronous": req.asynchronous,
                     "length": req.data_len, "grant": None, "data": None}
            invocation.open_puts[req.request_id] = state
            try:
                state["grant"] = record.region.grant_slot(req.data_len)
            except RegionFull:
                invocation.bump("put_ring_fallbacks")
                self.metrics.bump("put_ring_fallbacks")
                await channel.send(MessageType.PUT_ACK, proto.encode_put_ack(
                    req.request_id, Status.OK, PutKind.GRANT_RING))
                return
            await channel.send(MessageType.PUT_ACK, proto.encode_put_ack(
                req.request_id, Status.OK, PutKind.GRANT_SLOT, state["grant"].offset))
            return

        state = invocation.open_puts.pop(req.request_id, None)
        if state is None or state["grant"] is None:
            await channel.send(MessageType.PUT_ACK, proto.encode_put_ack(
                req.request_id, Status.ILLEGAL, PutKind.COMPLETED))
            return
        if self.cfg.debug.integrity and req.checksum:
            actual = record.region.checksum(state["grant"])
            if actual != req.checksum:
                self.metrics.bump("put_checksum_mismatches")
        await self._finish_put(record, invocation, channel, req.request_id, state)

    async def _handle_put_stream(self, record: SandboxRecord, invocation: Invocation,
                                 channel: "GuestChannel", body: bytes) -> None:
        """Guest-to-backend ring stream carrying an oversize PUT payload."""
        request_id, total = proto.decode_stream_open(body)
        state = invocation.open_puts.pop(request_id, None)
        if state is None or state["grant"] is not None:
            await channel.send(MessageType.ERROR,
                               proto.encode_error(ErrorCode.ILLEGAL_STATE, "no ring put open"))
            return
        ring = record.region.up_ring
        buf = bytearray()
        while len(buf) < total:
            chunk = ring.read(min(STAGING_BYTES, total - len(buf)))
            if not chunk:
                await asyncio.sleep(RING_POLL_S)
                continue
            buf += chunk
            invocation.peak_ring_bytes = max(invocation.peak_ring_bytes, ring.used())
        state["data"] = bytes(buf)
        await self._finish_put(record, invocation, channel, request_id, state)

    async def _finish_put(self, record: SandboxRecord, invocation: Invocation,
                          channel: "GuestChannel", request_id: int, state: dict) -> None:
        ref: ObjectRef = state["ref"]
        self.resolve_credentials(invocation.fn.name)
        asynchronous = state["asynchronous"] and self.cfg.mode == "offloaded-async"
        if asynchronous:
            pending = PendingWrite(
                invocation_id=invocation.envelope.invocation_id,
                idempotency_key=invocation.envelope.idempotency_key,
                ref=ref, grant=state["grant"], data=state["data"])
            invocation.pending_writes.append(pending)
            invocation.pending_count += 1
            invocation.gate.clear()
            asyncio.get_running_loop().create_task(
                self._writeback(record, invocation, pending))
            self.metrics.bump("puts_delegated")
            await channel.send(MessageType.PUT_ACK, proto.encode_put_ack(
                request_id, Status.OK, PutKind.DELEGATED))
            return
        # synchronous write-through
        payload = (record.region.view(state["grant"].offset, state["grant"].length)
                   if state["grant"] is not None else state["data"])
        try:
            await self.limiters.acquire(invocation.fn.name, invocation.fn.clients[0],
                                        state["length"])
            version = await self._store_put(ref, payload)
            self.metrics.bump("puts_sync")
            await channel.send(MessageType.PUT_ACK, proto.encode_put_ack(
                request_id, Status.OK, PutKind.COMPLETED, version))
        except (InjectedFailure, NotFound, OSError, EOFError) as exc:
            self.metrics.bump("puts_sync_failed")
            await channel.send(MessageType.PUT_ACK, proto.encode_put_ack(
                request_id, Status.ERROR, PutKind.COMPLETED))
            logger.warning("sync PUT %s failed: %s", ref, exc)
        finally:
            if state["grant"] is not None:
                if isinstance(payload, memoryview):
                    payload.release()
                record.region.release_grant(state["grant"])

    async def _store_put(self, ref: ObjectRef, payload) -> int:
        conn = self.store_pool.acquire()
        try:
            version = await conn.put(ref, payload)
        except BaseException:
            self.store_pool.release(conn, dirty=True)
            raise
        self.store_pool.release(conn)
        return version

    async def _writeback(self, record: SandboxRecord, invocation: Invocation,
                         pending: PendingWrite) -> None:
        """Drive one delegated write to the store with a bounded retry
        budget; the response buffer is gated on the outcome."""
        payload = (record.region.view(pending.grant.offset, pending.grant.length)
                   if pending.grant is not None else pending.data)
        error = ""
        try:
            budget = 1 + self.cfg.writeback.retries
            for attempt in range(budget):
                pending.attempts = attempt + 1
                pending.state = PendingState.IN_FLIGHT
                try:
                    await self.limiters.acquire(invocation.fn.name, invocation.fn.clients[0],
                                                len(payload))
                    await self._store_put(pending.ref, payload)
                    pending.state = PendingState.ACKED
                    pending.acked_at_us = now_us()
                    self.metrics.bump("writebacks_acked")
                    invocation.write_done(True, when_us=pending.acked_at_us)
                    return
                except (InjectedFailure, NotFound, OSError, EOFError) as exc:
                    error = f"{type(exc).__name__}: {exc}"
                    self.metrics.bump("writeback_retries")
                    if attempt + 1 < budget:
                        await asyncio.sleep(self.cfg.writeback.backoff_ms / 1e3 * (2 ** attempt))
            pending.state = PendingState.FAILED
            self.metrics.bump("writebacks_failed")
            invocation.write_done(False, error=error)
        finally:
            if pending.grant is not None:
                if isinstance(payload, memoryview):
                    payload.release()
                if record.region is not None:
                    record.region.release_grant(pending.grant)


class GuestChannel:
    """Framed duplex channel to one sandbox, with optional raw capture of
    every sandbox-scope frame for audits."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                 capture=None):
        self.reader = reader
        self.writer = writer
        self.capture = capture
        self._lock = asyncio.Lock()

    async def recv(self):
        header = await self.reader.readexactly(4)
        (length,) = struct.unpack("<I", header)
        if length > proto.MAX_FRAME_LEN or length < 1:
            raise proto.OversizeFrame(f"bad frame length {length}")
        rest = await self.reader.readexactly(length)
        if self.capture:
            self.capture.write(header + rest)
            self.capture.flush()
        raw_type = rest[0]
        try:
            msg_type = MessageType(raw_type)
        except ValueError:
            return raw_type, rest[1:]
        return msg_type, rest[1:]

    async def send(self, msg_type: MessageType, body: bytes) -> None:
        frame = proto.encode_frame(msg_type, body)
        if self.capture:
            self.capture.write(frame)
            self.capture.flush()
        async with self._lock:
            self.writer.write(frame)
            await self.writer.drain()

    def close(self) -> None:
        try:
            self.writer.close()
        except (ConnectionResetError, BrokenPipeError):
            pass


async def _recv_frame(reader: asyncio.StreamReader):
    header = await reader.readexactly(4)
    (length,) = struct.unpack("<I", header)
    if length > proto.MAX_FRAME_LEN or length < 1:
        raise proto.OversizeFrame(f"bad frame length {length}")
    rest = await reader.readexactly(length)
    raw_type = rest[0]
    try:
        msg_type = MessageType(raw_type)
    except ValueError:
        return raw_type, rest[1:]
    return msg_type, rest[1:]


async def _send_frame(writer: asyncio.StreamWriter, lock: asyncio.Lock,
                      msg_type: MessageType, body: bytes) -> None:
    async with lock:
        writer.write(proto.encode_frame(msg_type, body))
        await writer.drain()


def _zero_breakdown() -> dict:
    return {"queue": 0, "restore": 0, "prefetch": 0, "exec": 0, "writeback": 0}


def _first_prefetch_error(invocation: Invocation) -> str:
    for rec in invocation.prefetch.values():
        if rec.state == PrefetchState.FAILED:
            return rec.error or f"prefetch of {rec.hint.ref} failed"
    return "prefetch failed"


def run_backend(config_path: str, overrides: dict) -> None:
    """Blocking entry point for the backend / coupled-runner CLIs."""
    cfg = load_config(config_path)
    for name, value in overrides.items():
        if value is not None:
            setattr(cfg, name, value)
    if not cfg.region_dir:
        from .config import default_region_dir

        cfg.region_dir = default_region_dir()
    logging.basicConfig(level=os.environ.get("NEXUS_LOG", "WARNING"))
    backend = Backend(cfg, config_path)
    asyncio.run(backend.serve_forever())
