"""In-memory S3-like object store with a length-prefixed TCP protocol.

The service models network cost with a single simulated delay applied at
response time (one-way latency plus size over bandwidth) and supports PUT
failure injection, which is what makes prefetch overlap, writeback deferral,
and at-least-once retries quantitatively observable.

Wire format (little endian):

    request  = [u32 length][u8 op][u16 bucket_len][bucket][u16 key_len][key][payload]
    response = [u32 length][u8 status][payload]

op: GET=1 (no payload), PUT=2 (payload = object bytes), ADMIN=3 (bucket/key
fields absent; body = [u8 subop][JSON args], used by tests and the harness
for seeding, failure injection, and counters). PUT responses carry the new
version as a u64; statuses are OK=0, NOT_FOUND=1, FAILURE=2.
"""

from __future__ import annotations

import asyncio
import base64
import json
import logging
import socket
import struct
from dataclasses import dataclass

from .errors import InjectedFailure, NotFound, StoreError
from .proto import ObjectRef

logger = logging.getLogger(__name__)

OP_GET = 1
OP_PUT = 2
OP_ADMIN = 3

ST_OK = 0
ST_NOT_FOUND = 1
ST_FAILURE = 2

ADMIN_FAIL_NEXT_PUTS = 1
ADMIN_VERSION = 2
ADMIN_COUNTERS = 3
ADMIN_SEED = 4
ADMIN_PROFILE = 5
ADMIN_RESET = 6

_LEN = struct.Struct("<I")
_U16 = struct.Struct("<H")
_U64 = struct.Struct("<Q")


@dataclass
class StoreProfile:
    one_way_latency_us: int = 0
    bandwidth_bps: int = 100_000_000_000
    fail_next_puts: int = 0

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise ValueError("bandwidth_bps must be positive")

    def service_s(self, payload_bytes: int) -> float:
        return self.one_way_latency_us / 1e6 + payload_bytes * 8 / self.bandwidth_bps


@dataclass
class StoredObject:
    ref: ObjectRef
    data: bytes
    version: int


class ObjectStore:
    """The object map plus delay model; shared by the TCP service and by
    in-process tests. Objects are immutable bytes, so a concurrent reader
    sees either the old or the new version in full, never a torn mix."""

    def __init__(self, profile: StoreProfile | None = None):
        self.profile = profile or StoreProfile()
        self._objects: dict[tuple[str, str], StoredObject] = {}
        self.get_count = 0
        self.put_count = 0
        self.failed_puts = 0
        self.get_by_ref: dict[str, int] = {}
        self.put_by_ref: dict[str, int] = {}

    def lookup(self, bucket: str, key: str) -> StoredObject:
        obj = self._objects.get((bucket, key))
        if obj is None:
            raise NotFound(bucket, key)
        return obj

    def seed(self, bucket: str, key: str, data: bytes) -> int:
        """Insert without delay or counters; used to pre-load trace inputs."""
        prev = self._objects.get((bucket, key))
        version = (prev.version if prev else 0) + 1
        self._objects[(bucket, key)] = StoredObject(ObjectRef(bucket, key), bytes(data), version)
        return version

    def version_of(self, bucket: str, key: str) -> int:
        obj = self._objects.get((bucket, key))
        return obj.version if obj else 0

    async def get(self, bucket: str, key: str) -> bytes:
        self.get_count += 1
        ref = f"{bucket}/{key}"
        self.get_by_ref[ref] = self.get_by_ref.get(ref, 0) + 1
        try:
            obj = self.lookup(bucket, key)
        except NotFound:
            await asyncio.sleep(self.profile.one_way_latency_us / 1e6)
            raise
        await asyncio.sleep(self.profile.service_s(len(obj.data)))
        return obj.data

    async def put(self, bucket: str, key: str, data: bytes) -> int:
        self.put_count += 1
        ref = f"{bucket}/{key}"
        self.put_by_ref[ref] = self.put_by_ref.get(ref, 0) + 1
        await asyncio.sleep(self.profile.service_s(len(data)))
        if self.profile.fail_next_puts > 0:
            self.profile.fail_next_puts -= 1
            self.failed_puts += 1
            raise InjectedFailure(f"injected PUT failure for {ref}")
        return self.seed(bucket, key, data)

    def counters(self) -> dict:
        return {
            "get_requests": self.get_count,
            "put_requests": self.put_count,
            "failed_puts": self.failed_puts,
            "get_by_ref": dict(self.get_by_ref),
            "put_by_ref": dict(self.put_by_ref),
            "versions": {f"{b}/{k}": o.version for (b, k), o in self._objects.items()},
        }


class StoreService:
    """asyncio TCP front for an ObjectStore; per-request delays never block
    unrelated connections."""

    def __init__(self, store: ObjectStore, host: str = "127.0.0.1", port: int = 0):
        self.store = store
        self.host = host
        self.port = port
        self._server: asyncio.AbstractServer | None = None

    async def start(self) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._serve, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        return self.host, self.port

    async def stop(self) -> None:
        if self._server:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                header = await reader.readexactly(4)
                (length,) = _LEN.unpack(header)
                body = await reader.readexactly(length)
                status, payload = await self._dispatch(body)
                writer.write(_LEN.pack(1 + len(payload)) + bytes([status]) + payload)
                await writer.drain()
        except (asyncio.IncompleteReadError, ConnectionResetError, BrokenPipeError):
            pass
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionResetError, BrokenPipeError):
                pass

    async def _dispatch(self, body: bytes) -> tuple[int, bytes]:
        if not body:
            return ST_FAILURE, b"empty request"
        op = body[0]
        if op == OP_ADMIN:
            return self._admin(body[1:])
        try:
            bucket, key, pos = _parse_ref(body, 1)
        except (struct.error, UnicodeDecodeError, IndexError):
            return ST_FAILURE, b"malformed request"
        if op == OP_GET:
            try:
                data = await self.store.get(bucket, key)
            except NotFound:
                return ST_NOT_FOUND, b""
            return ST_OK, data
        if op == OP_PUT:
            try:
                version = await self.store.put(bucket, key, body[pos:])
            except InjectedFailure as exc:
                return ST_FAILURE, str(exc).encode()
            return ST_OK, _U64.pack(version)
        return ST_FAILURE, f"unknown op {op}".encode()

    def _admin(self, body: bytes) -> tuple[int, bytes]:
        subop = body[0]
        args = json.loads(body[1:] or b"{}")
        if subop == ADMIN_FAIL_NEXT_PUTS:
            self.store.profile.fail_next_puts = int(args["count"])
            return ST_OK, b"{}"
        if subop == ADMIN_VERSION:
            version = self.store.version_of(args["bucket"], args["key"])
            return ST_OK, json.dumps({"version": version}).encode()
        if subop == ADMIN_COUNTERS:
            return ST_OK, json.dumps(self.store.counters()).encode()
        if subop == ADMIN_SEED:
            data = base64.b64decode(args["data_b64"])
            version = self.store.seed(args["bucket"], args["key"], data)
            return ST_OK, json.dumps({"version": version}).encode()
        if subop == ADMIN_PROFILE:
            if "one_way_latency_us" in args:
                self.store.profile.one_way_latency_us = int(args["one_way_latency_us"])
            if "bandwidth_bps" in args:
                self.store.profile.bandwidth_bps = int(args["bandwidth_bps"])
            return ST_OK, b"{}"
        if subop == ADMIN_RESET:
            self.store.__init__(self.store.profile)
            return ST_OK, b"{}"
        return ST_FAILURE, f"unknown admin subop {subop}".encode()


def _parse_ref(body: bytes, pos: int) -> tuple[str, str, int]:
    (blen,) = _U16.unpack_from(body, pos)
    pos += 2
    bucket = body[pos:pos + blen].decode("utf-8")
    pos += blen
    (klen,) = _U16.unpack_from(body, pos)
    pos += 2
    key = body[pos:pos + klen].decode("utf-8")
    pos += klen
    return bucket, key, pos


def _request(op: int, bucket: str, key: str, payload: bytes = b"") -> bytes:
    b = bucket.encode("utf-8")
    k = key.encode("utf-8")
    body = bytes([op]) + _U16.pack(len(b)) + b + _U16.pack(len(k)) + k + payload
    return _LEN.pack(len(body)) + body


def _admin_request(subop: int, args: dict) -> bytes:
    body = bytes([OP_ADMIN, subop]) + json.dumps(args).encode()
    return _LEN.pack(len(body)) + body


class BlockingStoreClient:
    """Plain socket client; the coupled baseline's guests use this directly
    and therefore pay the full store round trip inside the sandbox."""

    def __init__(self, host: str, port: int, connect_timeout: float = 5.0):
        self.host = host
        self.port = port
        self._timeout = connect_timeout
        self._sock: socket.socket | None = None
        self.get_ops = 0
        self.put_ops = 0

    def _conn(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection((self.host, self.port), timeout=self._timeout)
            self._sock.settimeout(600.0)
        return self._sock

    def _exchange(self, request: bytes) -> tuple[int, bytes]:
        try:
            sock = self._conn()
            sock.sendall(request)
            header = _recv_exactly(sock, 4)
            (length,) = _LEN.unpack(header)
            body = _recv_exactly(sock, length)
        except (OSError, EOFError):
            self.close()
            # one silent reconnect; a second failure propagates
            sock = self._conn()
            sock.sendall(request)
            header = _recv_exactly(sock, 4)
            (length,) = _LEN.unpack(header)
            body = _recv_exactly(sock, length)
        return body[0], body[1:]

    def get_object(self, ref: ObjectRef) -> bytes:
        self.get_ops += 1
        status, payload = self._exchange(_request(OP_GET, ref.bucket, ref.key))
        if status == ST_NOT_FOUND:
            raise NotFound(ref.bucket, ref.key)
        if status != ST_OK:
            raise StoreError(payload.decode("utf-8", "replace"))
        return payload

    def put_object(self, ref: ObjectRef, data, asynchronous: bool = False) -> int:
        # the store protocol has no asynchronous path; the flag exists for
        # call-shape parity with the remoted client
        self.put_ops += 1
        status, payload = self._exchange(_request(OP_PUT, ref.bucket, ref.key, bytes(data)))
        if status != ST_OK:
            raise StoreError(payload.decode("utf-8", "replace"))
        return _U64.unpack(payload)[0]

    def admin(self, subop: int, args: dict) -> dict:
        status, payload = self._exchange(_admin_request(subop, args))
        if status != ST_OK:
            raise StoreError(payload.decode("utf-8", "replace"))
        return json.loads(payload)

    def seed(self, ref: ObjectRef, data: bytes) -> int:
        return self.admin(ADMIN_SEED, {
            "bucket": ref.bucket, "key": ref.key,
            "data_b64": base64.b64encode(data).decode("ascii"),
        })["version"]

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None


def _recv_exactly(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise EOFError("store connection closed")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


class AsyncStoreConnection:
    """One raw non-blocking connection used by the backend. GETs expose the
    response header before the payload so the caller can size a slot grant
    and receive the object bytes straight into shared memory."""

    def __init__(self, host: str, port: int):
        self.host = host
        self.port = port
        self._sock: socket.socket | None = None

    async def _conn(self) -> socket.socket:
        if self._sock is None:
            loop = asyncio.get_running_loop()
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setblocking(False)
            try:
                await loop.sock_connect(sock, (self.host, self.port))
            except OSError:
                sock.close()
                raise
            self._sock = sock
        return self._sock

    async def _send(self, data: bytes) -> None:
        loop = asyncio.get_running_loop()
        await loop.sock_sendall(await self._conn(), data)

    async def _recv_exactly(self, n: int) -> bytes:
        loop = asyncio.get_running_loop()
        sock = await self._conn()
        out = bytearray()
        while len(out) < n:
            chunk = await loop.sock_recv(sock, n - len(out))
            if not chunk:
                raise EOFError("store connection closed")
            out += chunk
        return bytes(out)

    async def _recv_into(self, view: memoryview) -> None:
        loop = asyncio.get_running_loop()
        sock = await self._conn()
        pos = 0
        while pos < len(view):
            n = await loop.sock_recv_into(sock, view[pos:])
            if n == 0:
                raise EOFError("store connection closed")
            pos += n

    async def get_header(self, ref: ObjectRef) -> tuple[int, int]:
        """Send a GET and read the response header; returns (status, payload
        length). The caller must then drain exactly that many payload bytes
        via recv_payload_into / recv_payload_chunks."""
        await self._send(_request(OP_GET, ref.bucket, ref.key))
        header = await self._recv_exactly(4)
        (length,) = _LEN.unpack(header)
        status = (await self._recv_exactly(1))[0]
        return status, length - 1

    async def recv_payload_into(self, view: memoryview) -> None:
        await self._recv_into(view)

    async def recv_payload(self, length: int) -> bytes:
        return await self._recv_exactly(length)

    async def put(self, ref: ObjectRef, data) -> int:
        await self._send(_request(OP_PUT, ref.bucket, ref.key, bytes(data)))
        header = await self._recv_exactly(4)
        (length,) = _LEN.unpack(header)
        body = await self._recv_exactly(length)
        status, payload = body[0], body[1:]
        if status == ST_NOT_FOUND:
            raise NotFound(ref.bucket, ref.key)
        if status != ST_OK:
            raise InjectedFailure(payload.decode("utf-8", "replace"))
        return _U64.unpack(payload)[0]

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None


class AsyncStorePool:
    """Small pool of AsyncStoreConnections so concurrent transfers never
    serialize behind one socket."""

    def __init__(self, host: str, port: int, max_idle: int = 8):
        self.host = host
        self.port = port
        self.max_idle = max_idle
        self._idle: list[AsyncStoreConnection] = []

    def acquire(self) -> AsyncStoreConnection:
        if self._idle:
            return self._idle.pop()
        return AsyncStoreConnection(self.host, self.port)

    def release(self, conn: AsyncStoreConnection, *, dirty: bool = False) -> None:
        if dirty or len(self._idle) >= self.max_idle:
            conn.close()
        else:
            self._idle.append(conn)

    def close(self) -> None:
        for conn in self._idle:
            conn.close()
        self._idle.clear()


def run_service(host: str, port: int, latency_us: int, bandwidth_bps: int) -> None:
    """Blocking entry point for the store CLI."""

    async def main() -> None:
        store = ObjectStore(StoreProfile(one_way_latency_us=latency_us,
                                         bandwidth_bps=bandwidth_bps))
        service = StoreService(store, host, port)
        bound_host, bound_port = await service.start()
        logger.info("store listening on %s:%d", bound_host, bound_port)
        print(f"store listening on {bound_host}:{bound_port}", flush=True)
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        import signal

        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        await stop.wait()
        await service.stop()

    asyncio.run(main())
