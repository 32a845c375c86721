import io

import pytest
from hypothesis import given, settings, strategies as st

from nexus import proto
from nexus.errors import HintTooLarge, OversizeFrame, SchemaError, TruncatedFrame
from nexus.proto import (
    InputHint,
    InvocationEnvelope,
    MessageType,
    ObjectRef,
    decode_frame,
    encode_frame,
    new_id,
    parse_envelope,
)


def reader_for(data: bytes):
    stream = io.BytesIO(data)
    return stream.read


class TestFraming:
    def test_minimal_error_frame(self):
        assert encode_frame(MessageType.ERROR, b"") == bytes([0x01, 0, 0, 0, 0x7F])

    def test_length_arithmetic(self):
        frame = encode_frame(MessageType.GET_REQ, b"0123456789")
        assert len(frame) == 15
        assert frame[:4] == bytes([0x0B, 0, 0, 0])

    def test_decode_minimal(self):
        msg_type, body = decode_frame(reader_for(bytes([0x01, 0, 0, 0, 0x7F])))
        assert msg_type == MessageType.ERROR
        assert body == b""

    def test_truncated_header(self):
        with pytest.raises(TruncatedFrame):
            decode_frame(reader_for(bytes([0x01, 0, 0])))

    def test_truncated_body(self):
        with pytest.raises(TruncatedFrame):
            decode_frame(reader_for(bytes([0x05, 0, 0, 0, 0x11, 0xAA])))

    def test_oversize_declared_length(self):
        with pytest.raises(OversizeFrame):
            decode_frame(reader_for((0x01000001).to_bytes(4, "little") + b"\x11"))

    def test_oversize_encode(self):
        with pytest.raises(OversizeFrame):
            encode_frame(MessageType.GET_REQ, b"x" * proto.MAX_FRAME_LEN)

    def test_unknown_type_decodes_as_int(self):
        msg_type, body = decode_frame(reader_for(encode_frame(0x42, b"zz")))
        assert msg_type == 0x42
        assert body == b"zz"

    def test_zero_length_rejected(self):
        with pytest.raises(OversizeFrame):
            decode_frame(reader_for(bytes([0, 0, 0, 0])))

    @settings(max_examples=200, deadline=None)
    @given(
        msg_type=st.sampled_from(list(MessageType)),
        body=st.binary(max_size=4096),
    )
    def test_round_trip(self, msg_type, body):
        decoded_type, decoded_body = decode_frame(reader_for(encode_frame(msg_type, body)))
        assert decoded_type == msg_type
        assert decoded_body == body

    def test_scope_split(self):
        for t in MessageType:
            assert proto.is_ingress_scope(t) != proto.is_sandbox_scope(t)
        assert proto.is_ingress_scope(MessageType.INGRESS_INVOKE)
        assert proto.is_sandbox_scope(MessageType.GET_REQ)


class TestObjectRef:
    def test_valid(self):
        ref = ObjectRef("bucket", "some/key")
        assert str(ref) == "bucket/some/key"

    @pytest.mark.parametrize("bucket,key", [("", "k"), ("b", ""), ("b\x00", "k"), ("b", "k\x00")])
    def test_invalid(self, bucket, key):
        with pytest.raises(SchemaError):
            ObjectRef(bucket, key)

    def test_length_limits(self):
        ObjectRef("b" * 63, "k" * 1024)
        with pytest.raises(SchemaError):
            ObjectRef("b" * 64, "k")
        with pytest.raises(SchemaError):
            ObjectRef("b", "k" * 1025)


class TestEnvelope:
    def test_direct_mapping(self):
        raw = b'{"function":"aes","inputs":[{"bucket":"b","key":"k","size_bytes":1048576}]}'
        env = parse_envelope(raw)
        assert env.function == "aes"
        assert len(env.input_hints) == 1
        assert env.input_hints[0].ref == ObjectRef("b", "k")
        assert env.input_hints[0].size_bytes == 1048576

    def test_absent_hints_mean_fallback(self):
        env = parse_envelope(b'{"function":"web"}')
        assert env.input_hints == ()
        assert env.output_hints == ()

    def test_hint_too_large(self):
        raw = b'{"function":"f","inputs":[{"bucket":"b","key":"k","size_bytes":100}]}'
        with pytest.raises(HintTooLarge):
            parse_envelope(raw, max_hint_bytes=99)
        parse_envelope(raw, max_hint_bytes=100)

    def test_schema_error_names_field(self):
        with pytest.raises(SchemaError) as err:
            parse_envelope(b'{"function":"f","inputs":[{"bucket":"b"}]}')
        assert err.value.field == "inputs[0].key"

    def test_event_body_size_limit(self):
        import base64

        big = base64.b64encode(b"x" * (proto.MAX_EVENT_BODY + 1)).decode()
        with pytest.raises(SchemaError):
            parse_envelope(('{"function":"f","event_body_b64":"%s"}' % big).encode())

    def test_zero_id_rejected(self):
        raw = ('{"function":"f","invocation_id":"%s"}' % ("00" * 16)).encode()
        with pytest.raises(SchemaError):
            parse_envelope(raw)


_refs = st.builds(
    ObjectRef,
    bucket=st.text(alphabet=st.characters(blacklist_characters="\x00", min_codepoint=33, max_codepoint=126), min_size=1, max_size=20),
    key=st.text(alphabet=st.characters(blacklist_characters="\x00", min_codepoint=33, max_codepoint=126), min_size=1, max_size=40),
)

_envelopes = st.builds(
    InvocationEnvelope,
    invocation_id=st.just(0).map(lambda _: new_id()),
    function=st.text(alphabet="abcdefg-0123", min_size=1, max_size=12),
    input_hints=st.lists(
        st.builds(InputHint, ref=_refs, size_bytes=st.one_of(st.none(), st.integers(0, 2**40))),
        max_size=4,
    ).map(tuple),
    output_hints=st.lists(_refs, max_size=3).map(tuple),
    event_body=st.binary(max_size=512),
    idempotency_key=st.just(0).map(lambda _: new_id()),
)


class TestEnvelopeRoundTrip:
    @settings(max_examples=200, deadline=None)
    @given(env=_envelopes)
    def test_json_round_trip(self, env):
        assert parse_envelope(proto.envelope_to_json(env), max_hint_bytes=2**40) == env

    @settings(max_examples=200, deadline=None)
    @given(env=_envelopes)
    def test_invoke_binary_round_trip(self, env):
        assert proto.decode_invoke(proto.encode_invoke(env)) == env


class TestBinaryBodies:
    def test_get_req(self):
        body = proto.encode_get_req(7, ObjectRef("b", "k"))
        assert proto.decode_get_req(body) == (7, ObjectRef("b", "k"))

    def test_get_resp(self):
        body = proto.encode_get_resp(9, proto.Status.OK, proto.TransferMode.RING, 64, 1 << 30)
        assert proto.decode_get_resp(body) == (9, proto.Status.OK, proto.TransferMode.RING, 64, 1 << 30)

    def test_put_alloc(self):
        req = proto.decode_put_req(proto.encode_put_alloc(3, ObjectRef("b", "k"), 100, True))
        assert req.request_id == 3
        assert req.phase == proto.PutPhase.ALLOC
        assert req.asynchronous is True
        assert req.data_len == 100
        assert req.ref == ObjectRef("b", "k")

    def test_put_commit(self):
        req = proto.decode_put_req(proto.encode_put_commit(4, 0xDEADBEEF))
        assert req.phase == proto.PutPhase.COMMIT
        assert req.checksum == 0xDEADBEEF

    def test_put_ack(self):
        body = proto.encode_put_ack(5, proto.Status.OK, proto.PutKind.COMPLETED, 12)
        assert proto.decode_put_ack(body) == (5, proto.Status.OK, proto.PutKind.COMPLETED, 12)

    def test_fn_response(self):
        inv = new_id()
        body = proto.encode_fn_response(inv, proto.Status.OK, b"payload", {"exec_us": 5})
        assert proto.decode_fn_response(body) == (inv, proto.Status.OK, b"payload", {"exec_us": 5})

    def test_stream_frames(self):
        assert proto.decode_stream_open(proto.encode_stream_open(1, 99)) == (1, 99)
        assert proto.decode_stream_close(proto.encode_stream_close(1, proto.Status.OK, 99)) == (
            1, proto.Status.OK, 99)

    def test_error_frame(self):
        code, detail = proto.decode_error(proto.encode_error(proto.ErrorCode.MALFORMED, "bad"))
        assert code == proto.ErrorCode.MALFORMED
        assert detail == "bad"

    def test_trailing_bytes_rejected(self):
        with pytest.raises(SchemaError):
            proto.decode_get_req(proto.encode_get_req(7, ObjectRef("b", "k")) + b"x")


class TestIngressResponse:
    def test_round_trip(self):
        inv = new_id()
        body = proto.ingress_response_body(
            inv, "ok", {"queue": 1, "restore": 2, "prefetch": 3, "exec": 4, "writeback": 5},
            payload=b"hi", extra={"timestamps_us": {"recv": 1}})
        doc = proto.parse_ingress_response(body)
        assert doc["invocation_id"] == inv.hex()
        assert doc["status"] == "ok"
        assert doc["payload"] == b"hi"
        assert doc["breakdown_us"]["writeback"] == 5
        assert doc["timestamps_us"] == {"recv": 1}
