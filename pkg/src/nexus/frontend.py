"""Guest-side client library: control channel, region attach, remoted GET/PUT.

The session is deliberately single-threaded: one invocation at a time, SDK
calls issued sequentially by the handler, no concurrency pushed onto the
handler. A SLOT GET hands back a zero-copy view over the shared region; a
RING GET hands back a pull-based stream that drains the downstream ring. A
PUT performs exactly one payload copy (handler memory into the slot or the
upstream ring).
"""

from __future__ import annotations

import hashlib
import socket
import time
from dataclasses import dataclass
from typing import Optional, Union

from . import proto
from .errors import AttachError, IllegalState, NotFound, StoreError, TransportError
from .proto import MessageType, ObjectRef, PutKind, Status, TransferMode
from .shmem import RegionAttachment

RING_POLL_S = 0.0002


class _FrameChannel:
    """Blocking framed socket with reconnect support."""

    def __init__(self, endpoint: str, connect_retries: int = 25, backoff_s: float = 0.2):
        self.endpoint = endpoint
        self.connect_retries = connect_retries
        self.backoff_s = backoff_s
        self.sock: Optional[socket.socket] = None

    def connect(self) -> None:
        last: Optional[Exception] = None
        for attempt in range(self.connect_retries):
            try:
                sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
                sock.connect(self.endpoint)
                self.sock = sock
                return
            except OSError as exc:
                last = exc
                time.sleep(self.backoff_s * min(attempt + 1, 5))
        raise AttachError(f"cannot connect control channel {self.endpoint}: {last}")

    def close(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            except OSError:
                pass
            self.sock = None

    def send(self, msg_type: int, body: bytes) -> None:
        if self.sock is None:
            raise TransportError("control channel not connected")
        try:
            self.sock.sendall(proto.encode_frame(msg_type, body))
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from None

    def recv(self, timeout: Optional[float] = None):
        if self.sock is None:
            raise TransportError("control channel not connected")
        self.sock.settimeout(timeout)
        try:
            return proto.decode_frame(self._read)
        except proto.TruncatedFrame as exc:
            raise TransportError(f"control channel closed: {exc}") from None
        except socket.timeout:
            raise
        finally:
            if self.sock is not None:
                self.sock.settimeout(None)

    def _read(self, n: int) -> bytes:
        assert self.sock is not None
        try:
            return self.sock.recv(n)
        except socket.timeout:
            raise
        except OSError as exc:
            raise proto.TruncatedFrame(str(exc)) from None


class PayloadView:
    """Read-only window over the shared region, valid until respond()."""

    def __init__(self, region_id: int, offset: int, length: int, view: memoryview):
        self.region_id = region_id
        self.offset = offset
        self.length = length
        self._view = view

    @property
    def data(self) -> memoryview:
        return self._view

    def __len__(self) -> int:
        return self.length

    def tobytes(self) -> bytes:
        return self._view.tobytes()

    def release(self) -> None:
        self._view.release()


class RingStream:
    """Pull-based byte stream over the downstream ring for one GET."""

    def __init__(self, session: "ClientSession", request_id: int, total: int):
        self._session = session
        self._request_id = request_id
        self.total = total
        self._consumed = 0
        self._closed = False

    def read(self, n: int = 256 * 1024) -> bytes:
        if self._consumed >= self.total:
            self._finish()
            return b""
        ring = self._session._region.down_ring
        want = min(n, self.total - self._consumed)
        while True:
            chunk = ring.read(want)
            if chunk:
                self._consumed += len(chunk)
                if self._consumed >= self.total:
                    self._finish()
                return chunk
            time.sleep(RING_POLL_S)

    def __iter__(self):
        while True:
            chunk = self.read()
            if not chunk:
                return
            yield chunk

    def drain(self) -> None:
        while self.read():
            pass

    def _finish(self) -> None:
        if self._closed:
            return
        self._closed = True
        msg_type, body = self._session._channel.recv()
        if msg_type != MessageType.STREAM_CLOSE:
            raise TransportError(f"expected STREAM_CLOSE, got {msg_type}")
        _req, status, total = proto.decode_stream_close(body)
        if status != Status.OK:
            raise StoreError(f"stream ended with status {status.name}")
        if total != self.total:
            raise TransportError(f"stream length mismatch: {total} != {self.total}")
        self._session._active_stream = None


@dataclass
class PutAck:
    delegated: bool
    version: int = 0


@dataclass
class SessionCounters:
    slot_get_bytes_copied: int = 0  # must stay 0: the zero-copy property
    put_ops: int = 0
    put_bytes_copied: int = 0
    put_copy_ops: int = 0
    get_ops: int = 0
    get_slot_hits: int = 0
    get_ring_streams: int = 0
    get_wait_us: int = 0
    put_wait_us: int = 0
    transport_retries: int = 0


class ClientSession:
    """One sandbox's connection to the backend plus its attached region."""

    def __init__(self, channel: _FrameChannel, region: Optional[RegionAttachment]):
        self._channel = channel
        self._region = region
        self._next_request_id = 1
        self._invocation: Optional[proto.InvocationEnvelope] = None
        self._views: list[PayloadView] = []
        self._active_stream: Optional[RingStream] = None
        self.counters = SessionCounters()

    # -- lifecycle -------------------------------------------------------

    @classmethod
    def attach(cls, control_endpoint: str, region_path: Optional[str],
               connect_retries: int = 25, backoff_s: float = 0.2) -> "ClientSession":
        """Connect the control channel and map the region; retries the
        connection with backoff so a restarting backend shows up as a latency
        blip rather than a failure."""
        channel = _FrameChannel(control_endpoint, connect_retries, backoff_s)
        channel.connect()
        region = None
        if region_path:
            try:
                region = RegionAttachment(region_path)
            except AttachError:
                channel.close()
                raise
        return cls(channel, region)

    def close(self) -> None:
        self._channel.close()
        if self._region is not None:
            self._region.close()

    def reset_counters(self) -> None:
        self.counters = SessionCounters()

    def recv_invoke(self, timeout: Optional[float] = None) -> proto.InvocationEnvelope:
        """Block until the next INVOKE; socket timeout propagates so the
        guest can exit after an idle period. Counters reset per invocation."""
        if self._invocation is not None:
            raise IllegalState("invocation already active")
        while True:
            msg_type, body = self._channel.recv(timeout)
            if msg_type == MessageType.INVOKE:
                self._invocation = proto.decode_invoke(body)
                self.reset_counters()
                return self._invocation
            if msg_type == MessageType.ERROR:
                code, detail = proto.decode_error(body)
                raise TransportError(f"backend error {code.name}: {detail}")
            self._reject(msg_type)

    # -- SDK surface -------------------------------------------------------

    def get_object(self, ref: ObjectRef) -> Union[PayloadView, RingStream]:
        self._require_active()
        start = time.monotonic()
        request_id = self._request_id()
        try:
            msg_type, body = self._rpc(MessageType.GET_REQ, proto.encode_get_req(request_id, ref),
                                       MessageType.GET_RESP)
        finally:
            self.counters.get_ops += 1
        _req, status, mode, offset, length = proto.decode_get_resp(body)
        if status == Status.NOT_FOUND:
            self.counters.get_wait_us += int((time.monotonic() - start) * 1e6)
            raise NotFound(ref.bucket, ref.key)
        if status != Status.OK:
            raise StoreError(f"GET {ref} failed with status {status.name}")
        if mode == TransferMode.SLOT:
            if self._region is None:
                raise TransportError("SLOT response without an attached region")
            view = PayloadView(0, offset, length, self._region.view(offset, length))
            self._views.append(view)
            self.counters.get_slot_hits += 1
            self.counters.get_wait_us += int((time.monotonic() - start) * 1e6)
            return view
        # RING: a STREAM_OPEN announces the pump before the first byte
        msg_type, body = self._channel.recv()
        if msg_type != MessageType.STREAM_OPEN:
            raise TransportError(f"expected STREAM_OPEN, got {msg_type}")
        _req, total = proto.decode_stream_open(body)
        if total != length:
            raise TransportError("stream length disagrees with GET_RESP")
        stream = RingStream(self, request_id, total)
        self._active_stream = stream
        self.counters.get_ring_streams += 1
        self.counters.get_wait_us += int((time.monotonic() - start) * 1e6)
        return stream

    def put_object(self, ref: ObjectRef, data, asynchronous: bool = False) -> PutAck:
        self._require_active()
        data = memoryview(data).cast("B") if not isinstance(data, (bytes, bytearray)) else memoryview(data)
        start = time.monotonic()
        request_id = self._request_id()
        self.counters.put_ops += 1
        try:
            ack = self._put_once(request_id, ref, data, asynchronous)
        except TransportError:
            # one transparent retry of the whole logical operation
            self.counters.transport_retries += 1
            request_id = self._request_id()
            ack = self._put_once(request_id, ref, data, asynchronous)
        self.counters.put_wait_us += int((time.monotonic() - start) * 1e6)
        return ack

    def _put_once(self, request_id: int, ref: ObjectRef, data: memoryview,
                  asynchronous: bool) -> PutAck:
        self._channel.send(MessageType.PUT_REQ,
                           proto.encode_put_alloc(request_id, ref, len(data), asynchronous))
        msg_type, body = self._expect(MessageType.PUT_ACK)
        _req, status, kind, value = proto.decode_put_ack(body)
        if status != Status.OK:
            raise StoreError(f"PUT {ref} rejected with status {status.name}")
        if kind == PutKind.GRANT_SLOT:
            assert self._region is not None
            self._region.write(value, data)  # the single producer-side copy
            self.counters.put_bytes_copied += len(data)
            self.counters.put_copy_ops += 1
            self._channel.send(MessageType.PUT_REQ, proto.encode_put_commit(request_id))
        elif kind == PutKind.GRANT_RING:
            assert self._region is not None
            self._channel.send(MessageType.STREAM_OPEN,
                               proto.encode_stream_open(request_id, len(data)))
            ring = self._region.up_ring
            sent = 0
            while sent < len(data):
                n = ring.write(data[sent:sent + ring.capacity])
                if n == 0:
                    time.sleep(RING_POLL_S)
                    continue
                sent += n
            self.counters.put_bytes_copied += len(data)
            self.counters.put_copy_ops += 1
            self._channel.send(MessageType.STREAM_CLOSE,
                               proto.encode_stream_close(request_id, Status.OK, len(data)))
        else:
            raise TransportError(f"unexpected PUT_ACK kind {kind}")
        msg_type, body = self._expect(MessageType.PUT_ACK)
        _req, status, kind, value = proto.decode_put_ack(body)
        if status == Status.NOT_FOUND:
            raise NotFound(ref.bucket, ref.key)
        if status != Status.OK:
            raise StoreError(f"PUT {ref} failed with status {status.name}")
        if kind == PutKind.DELEGATED:
            return PutAck(delegated=True)
        if kind == PutKind.COMPLETED:
            return PutAck(delegated=False, version=value)
        raise TransportError(f"unexpected final PUT_ACK kind {kind}")

    def respond(self, status: str, payload: bytes = b"", metrics: Optional[dict] = None) -> None:
        """Send FN_RESPONSE, invalidate every PayloadView, return to idle."""
        if self._invocation is None:
            raise IllegalState("no invocation active")
        if len(payload) > proto.MAX_EVENT_BODY:
            raise IllegalState(f"response payload exceeds {proto.MAX_EVENT_BODY} bytes")
        if self._active_stream is not None:
            self._active_stream.drain()
        body = proto.encode_fn_response(
            self._invocation.invocation_id,
            Status.OK if status == "ok" else Status.ERROR,
            payload,
            metrics or {},
        )
        self._channel.send(MessageType.FN_RESPONSE, body)
        for view in self._views:
            view.release()
        self._views.clear()
        self._invocation = None

    # -- internals -------------------------------------------------------

    def _request_id(self) -> int:
        rid = self._next_request_id
        self._next_request_id += 1
        return rid

    def _require_active(self) -> None:
        if self._invocation is None:
            raise IllegalState("no invocation active")

    def _expect(self, expected: MessageType):
        msg_type, body = self._channel.recv()
        if msg_type == MessageType.ERROR:
            code, detail = proto.decode_error(body)
            raise TransportError(f"backend error {code.name}: {detail}")
        if msg_type != expected:
            raise TransportError(f"expected {expected.name}, got {msg_type}")
        return msg_type, body

    def _rpc(self, msg_type: MessageType, body: bytes, expected: MessageType):
        try:
            self._channel.send(msg_type, body)
            return self._expect(expected)
        except TransportError:
            self.counters.transport_retries += 1
            self._channel.close()
            self._channel.connect()
            self._channel.send(msg_type, body)
            return self._expect(expected)

    def _reject(self, msg_type) -> None:
        name = getattr(msg_type, "name", str(msg_type))
        self._channel.send(MessageType.ERROR,
                           proto.encode_error(proto.ErrorCode.UNKNOWN_MSG_TYPE,
                                              f"unexpected {name}"))


def digest(obj) -> dict:
    """Content summary of a GET result; copy-free for PayloadViews."""
    h = hashlib.sha256()
    length = 0
    if isinstance(obj, PayloadView):
        h.update(obj.data)
        length = len(obj)
    elif isinstance(obj, RingStream):
        for chunk in obj:
            h.update(chunk)
            length += len(chunk)
    else:
        view = memoryview(obj)
        h.update(view)
        length = len(view)
    return {"sha256": h.hexdigest(), "length": length}
