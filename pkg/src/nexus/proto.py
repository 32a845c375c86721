"""Control-plane wire protocol: framing, message types, and body codecs.

Everything here is a pure codec with no I/O state; see PROTOCOL.md for the
byte-exact layouts (the cross-language shim maps the same formats).

Framing is a 4-byte little-endian length (covering the type byte plus body)
followed by one type byte and the body. Control frames are capped at 16 MiB;
bulk payloads never travel in frames, only through the shared-memory data
plane.
"""

from __future__ import annotations

import base64
import binascii
import enum
import json
import os
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Union

from .errors import HintTooLarge, OversizeFrame, SchemaError, TruncatedFrame

MAX_FRAME_LEN = 16 * 1024 * 1024  # length field upper bound (type byte + body)
MAX_EVENT_BODY = 64 * 1024
MAX_BUCKET_LEN = 63
MAX_KEY_LEN = 1024
DEFAULT_MAX_HINT_BYTES = 256 * 1024 * 1024

_HEADER = struct.Struct("<I")


class MessageType(enum.IntEnum):
    # ingress scope: 0x01 - 0x0F
    INGRESS_INVOKE = 0x01
    INGRESS_RESPONSE = 0x02
    # sandbox scope: 0x10 - 0x7F
    INVOKE = 0x10
    GET_REQ = 0x11
    GET_RESP = 0x12
    PUT_REQ = 0x13
    PUT_ACK = 0x14
    FN_RESPONSE = 0x15
    STREAM_OPEN = 0x16
    STREAM_CLOSE = 0x17
    ERROR = 0x7F


class Status(enum.IntEnum):
    OK = 0
    NOT_FOUND = 1
    ERROR = 2
    REGION_FULL = 3
    ILLEGAL = 4


class TransferMode(enum.IntEnum):
    SLOT = 0
    RING = 1


class PutKind(enum.IntEnum):
    GRANT_SLOT = 0
    GRANT_RING = 1
    DELEGATED = 2
    COMPLETED = 3


class PutPhase(enum.IntEnum):
    ALLOC = 0
    COMMIT = 1


class ErrorCode(enum.IntEnum):
    UNKNOWN_MSG_TYPE = 1
    UNKNOWN_SANDBOX = 2
    MALFORMED = 3
    ILLEGAL_STATE = 4
    SCOPE = 5


def is_ingress_scope(msg_type: int) -> bool:
    return 0x01 <= msg_type <= 0x0F

def is_sandbox_scope(msg_type: int) -> bool:
    return 0x10 <= msg_type <= 0x7F


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class ObjectRef:
    """A (bucket, key) name identifying a remote object."""

    bucket: str
    key: str

    def __post_init__(self):
        _check_name("bucket", self.bucket, MAX_BUCKET_LEN)
        _check_name("key", self.key, MAX_KEY_LEN)

    def __str__(self) -> str:
        return f"{self.bucket}/{self.key}"


def _check_name(field_name: str, value: str, limit: int) -> None:
    if not isinstance(value, str) or not value:
        raise SchemaError(field_name, "must be a non-empty string")
    if "\x00" in value:
        raise SchemaError(field_name, "must not contain NUL bytes")
    if len(value.encode("utf-8")) > limit:
        raise SchemaError(field_name, f"longer than {limit} bytes")


@dataclass(frozen=True)
class InputHint:
    ref: ObjectRef
    size_bytes: Optional[int] = None

    def __post_init__(self):
        if self.size_bytes is not None and self.size_bytes < 0:
            raise SchemaError("size_bytes", "must be non-negative")


@dataclass(frozen=True)
class InvocationEnvelope:
    """One ingress invocation attempt with promoted I/O hints.

    An empty ``input_hints`` signals the opaque-payload case: the backend
    performs no prefetch and the first GET takes the streaming fallback.
    ``idempotency_key`` is stable across retries of the same logical
    invocation; ``invocation_id`` is unique per attempt.
    """

    invocation_id: bytes
    function: str
    input_hints: tuple[InputHint, ...] = ()
    output_hints: tuple[ObjectRef, ...] = ()
    event_body: bytes = b""
    idempotency_key: bytes = b""

    def __post_init__(self):
        _check_id("invocation_id", self.invocation_id)
        _check_id("idempotency_key", self.idempotency_key)
        _check_name("function", self.function, 255)
        if len(self.event_body) > MAX_EVENT_BODY:
            raise SchemaError("event_body", f"exceeds {MAX_EVENT_BODY} bytes")


def _check_id(field_name: str, value: bytes) -> None:
    if not isinstance(value, bytes) or len(value) != 16:
        raise SchemaError(field_name, "must be 16 bytes")
    if value == b"\x00" * 16:
        raise SchemaError(field_name, "must not be all zero")


def new_id() -> bytes:
    """A fresh non-zero 16-byte identifier."""
    while True:
        value = os.urandom(16)
        if value != b"\x00" * 16:
            return value


# ---------------------------------------------------------------------------
# framing

def encode_frame(msg_type: int, body: bytes) -> bytes:
    if 1 + len(body) > MAX_FRAME_LEN:
        raise OversizeFrame(f"frame body of {len(body)} bytes exceeds limit")
    return _HEADER.pack(1 + len(body)) + bytes([msg_type]) + body


def decode_frame(read: Callable[[int], bytes]) -> tuple[Union[MessageType, int], bytes]:
    """Decode one frame from ``read(n)``, which returns at most n bytes.

    Unknown type bytes are returned as plain ints so the receiving loop can
    answer with an ERROR frame instead of dropping the channel.
    """
    header = _read_exactly(read, 4)
    (length,) = _HEADER.unpack(header)
    if length > MAX_FRAME_LEN:
        raise OversizeFrame(f"declared frame length {length} exceeds limit")
    if length < 1:
        raise OversizeFrame("declared frame length must be >= 1")
    rest = _read_exactly(read, length)
    raw_type = rest[0]
    try:
        msg_type: Union[MessageType, int] = MessageType(raw_type)
    except ValueError:
        msg_type = raw_type
    return msg_type, rest[1:]


def _read_exactly(read: Callable[[int], bytes], n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = read(remaining)
        if not chunk:
            raise TruncatedFrame(f"stream ended {remaining} bytes short")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def frames_from_buffer(data: bytes) -> Iterable[tuple[Union[MessageType, int], bytes]]:
    """Decode back-to-back frames from an in-memory capture."""
    pos = 0

    def read(n: int) -> bytes:
        nonlocal pos
        chunk = data[pos:pos + n]
        pos += len(chunk)
        return chunk

    while pos < len(data):
        yield decode_frame(read)


# ---------------------------------------------------------------------------
# ingress JSON bodies

def envelope_to_json(env: InvocationEnvelope) -> bytes:
    doc = {
        "invocation_id": env.invocation_id.hex(),
        "idempotency_key": env.idempotency_key.hex(),
        "function": env.function,
        "inputs": [
            {"bucket": h.ref.bucket, "key": h.ref.key}
            | ({"size_bytes": h.size_bytes} if h.size_bytes is not None else {})
            for h in env.input_hints
        ],
        "outputs": [{"bucket": r.bucket, "key": r.key} for r in env.output_hints],
        "event_body_b64": base64.b64encode(env.event_body).decode("ascii"),
    }
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def parse_envelope(data: bytes, max_hint_bytes: int = DEFAULT_MAX_HINT_BYTES) -> InvocationEnvelope:
    """Parse and validate the JSON body of an INGRESS_INVOKE frame.

    Absent hint arrays map to empty lists; every failure names the first
    offending field.
    """
    try:
        doc = json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError("body", f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("body", "must be a JSON object")

    function = doc.get("function")
    if not isinstance(function, str):
        raise SchemaError("function", "required string")

    invocation_id = _parse_hex_id(doc, "invocation_id")
    idempotency_key = _parse_hex_id(doc, "idempotency_key")

    hints = []
    for i, item in enumerate(_array(doc, "inputs")):
        ref = _parse_ref(item, f"inputs[{i}]")
        size = item.get("size_bytes")
        if size is not None:
            if not isinstance(size, int) or isinstance(size, bool) or size < 0:
                raise SchemaError(f"inputs[{i}].size_bytes", "must be a non-negative integer")
            if size > max_hint_bytes:
                raise HintTooLarge(f"inputs[{i}].size_bytes", size, max_hint_bytes)
        hints.append(InputHint(ref=ref, size_bytes=size))

    outputs = tuple(
        _parse_ref(item, f"outputs[{i}]") for i, item in enumerate(_array(doc, "outputs"))
    )

    raw_body = doc.get("event_body_b64", "")
    if not isinstance(raw_body, str):
        raise SchemaError("event_body_b64", "must be a base64 string")
    try:
        event_body = base64.b64decode(raw_body, validate=True)
    except (binascii.Error, ValueError):
        raise SchemaError("event_body_b64", "invalid base64") from None
    if len(event_body) > MAX_EVENT_BODY:
        raise SchemaError("event_body_b64", f"decodes to more than {MAX_EVENT_BODY} bytes")

    return InvocationEnvelope(
        invocation_id=invocation_id,
        function=function,
        input_hints=tuple(hints),
        output_hints=outputs,
        event_body=event_body,
        idempotency_key=idempotency_key,
    )


def _array(doc: dict, name: str) -> list:
    value = doc.get(name, [])
    if not isinstance(value, list):
        raise SchemaError(name, "must be an array")
    return value


def _parse_ref(item: object, where: str) -> ObjectRef:
    if not isinstance(item, dict):
        raise SchemaError(where, "must be an object")
    bucket = item.get("bucket")
    key = item.get("key")
    if not isinstance(bucket, str):
        raise SchemaError(f"{where}.bucket", "required string")
    if not isinstance(key, str):
        raise SchemaError(f"{where}.key", "required string")
    try:
        return ObjectRef(bucket=bucket, key=key)
    except SchemaError as exc:
        raise SchemaError(f"{where}.{exc.field}", exc.reason) from None


def _parse_hex_id(doc: dict, name: str) -> bytes:
    raw = doc.get(name)
    if raw is None:
        # The harness always supplies ids; tolerate their absence only for
        # hand-written test bodies by minting one.
        return new_id()
    if not isinstance(raw, str):
        raise SchemaError(name, "must be a 32-char hex string")
    try:
        value = bytes.fromhex(raw)
    except ValueError:
        raise SchemaError(name, "must be a 32-char hex string") from None
    try:
        _check_id(name, value)
    except SchemaError:
        raise
    return value


def ingress_response_body(
    invocation_id: bytes,
    status: str,
    breakdown_us: dict,
    *,
    error: Optional[str] = None,
    payload: bytes = b"",
    extra: Optional[dict] = None,
) -> bytes:
    doc: dict = {
        "invocation_id": invocation_id.hex(),
        "status": status,
        "breakdown_us": breakdown_us,
    }
    if error is not None:
        doc["error"] = error
    if payload:
        doc["payload_b64"] = base64.b64encode(payload).decode("ascii")
    if extra:
        doc.update(extra)
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def parse_ingress_response(data: bytes) -> dict:
    try:
        doc = json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError("body", f"not valid JSON: {exc}") from None
    for name in ("invocation_id", "status", "breakdown_us"):
        if name not in doc:
            raise SchemaError(name, "missing")
    if "payload_b64" in doc:
        doc["payload"] = base64.b64decode(doc["payload_b64"])
    else:
        doc["payload"] = b""
    return doc


# ---------------------------------------------------------------------------
# sandbox-scope binary bodies (little-endian throughout)

def _pack_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


class _Cursor:
    def __init__(self, body: bytes):
        self.body = body
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.body):
            raise SchemaError("body", "truncated binary body")
        out = self.body[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def done(self) -> None:
        if self.pos != len(self.body):
            raise SchemaError("body", "trailing bytes in binary body")


def encode_invoke(env: InvocationEnvelope) -> bytes:
    parts = [env.invocation_id, env.idempotency_key, _pack_str(env.function)]
    parts.append(struct.pack("<H", len(env.input_hints)))
    for hint in env.input_hints:
        parts.append(_pack_str(hint.ref.bucket))
        parts.append(_pack_str(hint.ref.key))
        if hint.size_bytes is None:
            parts.append(struct.pack("<BQ", 0, 0))
        else:
            parts.append(struct.pack("<BQ", 1, hint.size_bytes))
    parts.append(struct.pack("<H", len(env.output_hints)))
    for ref in env.output_hints:
        parts.append(_pack_str(ref.bucket))
        parts.append(_pack_str(ref.key))
    parts.append(struct.pack("<I", len(env.event_body)))
    parts.append(env.event_body)
    return b"".join(parts)


def decode_invoke(body: bytes) -> InvocationEnvelope:
    cur = _Cursor(body)
    invocation_id = cur.take(16)
    idempotency_key = cur.take(16)
    function = cur.string()
    hints = []
    for _ in range(cur.u16()):
        bucket = cur.string()
        key = cur.string()
        has_size = cur.u8()
        size = cur.u64()
        hints.append(InputHint(ObjectRef(bucket, key), size if has_size else None))
    outputs = []
    for _ in range(cur.u16()):
        outputs.append(ObjectRef(cur.string(), cur.string()))
    event_body = cur.take(cur.u32())
    cur.done()
    return InvocationEnvelope(
        invocation_id=invocation_id,
        function=function,
        input_hints=tuple(hints),
        output_hints=tuple(outputs),
        event_body=event_body,
        idempotency_key=idempotency_key,
    )


def encode_get_req(request_id: int, ref: ObjectRef) -> bytes:
    return struct.pack("<Q", request_id) + _pack_str(ref.bucket) + _pack_str(ref.key)


def decode_get_req(body: bytes) -> tuple[int, ObjectRef]:
    cur = _Cursor(body)
    request_id = cur.u64()
    ref = ObjectRef(cur.string(), cur.string())
    cur.done()
    return request_id, ref


_GET_RESP = struct.Struct("<QBBQQ")


def encode_get_resp(request_id: int, status: Status, mode: TransferMode,
                    offset: int, length: int) -> bytes:
    return _GET_RESP.pack(request_id, status, mode, offset, length)


def decode_get_resp(body: bytes) -> tuple[int, Status, TransferMode, int, int]:
    request_id, status, mode, offset, length = _GET_RESP.unpack(body)
    return request_id, Status(status), TransferMode(mode), offset, length


def encode_put_alloc(request_id: int, ref: ObjectRef, data_len: int, asynchronous: bool) -> bytes:
    return (struct.pack("<QBBQ", request_id, PutPhase.ALLOC, int(asynchronous), data_len)
            + _pack_str(ref.bucket) + _pack_str(ref.key))


def encode_put_commit(request_id: int, checksum: int = 0) -> bytes:
    return struct.pack("<QBQ", request_id, PutPhase.COMMIT, checksum)


@dataclass(frozen=True)
class PutRequest:
    request_id: int
    phase: PutPhase
    asynchronous: bool = False
    data_len: int = 0
    ref: Optional[ObjectRef] = None
    checksum: int = 0


def decode_put_req(body: bytes) -> PutRequest:
    cur = _Cursor(body)
    request_id = cur.u64()
    phase = PutPhase(cur.u8())
    if phase == PutPhase.ALLOC:
        asynchronous = bool(cur.u8())
        data_len = cur.u64()
        ref = ObjectRef(cur.string(), cur.string())
        cur.done()
        return PutRequest(request_id, phase, asynchronous, data_len, ref)
    checksum = cur.u64()
    cur.done()
    return PutRequest(request_id, phase, checksum=checksum)


_PUT_ACK = struct.Struct("<QBBQ")


def encode_put_ack(request_id: int, status: Status, kind: PutKind, value: int = 0) -> bytes:
    return _PUT_ACK.pack(request_id, status, kind, value)


def decode_put_ack(body: bytes) -> tuple[int, Status, PutKind, int]:
    request_id, status, kind, value = _PUT_ACK.unpack(body)
    return request_id, Status(status), PutKind(kind), value


def encode_fn_response(invocation_id: bytes, status: Status, payload: bytes,
                       metrics: Optional[dict] = None) -> bytes:
    raw_metrics = json.dumps(metrics or {}, separators=(",", ":")).encode("utf-8")
    return (invocation_id + struct.pack("<BI", status, len(payload)) + payload
            + struct.pack("<I", len(raw_metrics)) + raw_metrics)


def decode_fn_response(body: bytes) -> tuple[bytes, Status, bytes, dict]:
    cur = _Cursor(body)
    invocation_id = cur.take(16)
    status = Status(cur.u8())
    payload = cur.take(cur.u32())
    metrics = json.loads(cur.take(cur.u32()) or b"{}")
    cur.done()
    return invocation_id, status, payload, metrics


_STREAM_OPEN = struct.Struct("<QQ")
_STREAM_CLOSE = struct.Struct("<QBQ")


def encode_stream_open(request_id: int, total_length: int) -> bytes:
    return _STREAM_OPEN.pack(request_id, total_length)


def decode_stream_open(body: bytes) -> tuple[int, int]:
    return _STREAM_OPEN.unpack(body)


def encode_stream_close(request_id: int, status: Status, total_length: int) -> bytes:
    return _STREAM_CLOSE.pack(request_id, status, total_length)


def decode_stream_close(body: bytes) -> tuple[int, Status, int]:
    request_id, status, total = _STREAM_CLOSE.unpack(body)
    return request_id, Status(status), total


def encode_error(code: ErrorCode, detail: str) -> bytes:
    raw = detail.encode("utf-8")[:65535]
    return struct.pack("<BH", code, len(raw)) + raw


def decode_error(body: bytes) -> tuple[ErrorCode, str]:
    cur = _Cursor(body)
    code = ErrorCode(cur.u8())
    detail = cur.take(cur.u16()).decode("utf-8")
    cur.done()
    return code, detail
