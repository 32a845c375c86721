import { describe, expect, it } from "vitest";

import {
  FrameParser,
  MessageType,
  PutKind,
  PutPhase,
  Status,
  TransferMode,
  decodeGetResp,
  decodePutAck,
  decodeStreamClose,
  decodeStreamOpen,
  encodeFrame,
  encodeGetReq,
  encodePutAlloc,
  encodePutCommit,
  encodeStreamClose,
  encodeStreamOpen,
} from "../src/proto";

describe("framing", () => {
  it("encodes the minimal error frame", () => {
    expect(encodeFrame(MessageType.ERROR, Buffer.alloc(0))).toEqual(
      Buffer.from([0x01, 0, 0, 0, 0x7f]),
    );
  });

  it("length covers type byte plus body", () => {
    const frame = encodeFrame(MessageType.GET_REQ, Buffer.alloc(10));
    expect(frame.length).toBe(15);
    expect(frame.subarray(0, 4)).toEqual(Buffer.from([0x0b, 0, 0, 0]));
  });

  it("parses split frames incrementally", () => {
    const frame = encodeFrame(MessageType.GET_RESP, Buffer.from("abcdef"));
    const parser = new FrameParser();
    expect(parser.feed(frame.subarray(0, 3))).toEqual([]);
    expect(parser.feed(frame.subarray(3, 7))).toEqual([]);
    const frames = parser.feed(frame.subarray(7));
    expect(frames).toHaveLength(1);
    expect(frames[0].type).toBe(MessageType.GET_RESP);
    expect(frames[0].body.toString()).toBe("abcdef");
  });

  it("rejects oversize declared lengths", () => {
    const bad = Buffer.alloc(5);
    bad.writeUInt32LE(16 * 1024 * 1024 + 1, 0);
    expect(() => new FrameParser().feed(bad)).toThrow(/bad frame length/);
  });
});

describe("body codecs", () => {
  it("get request layout", () => {
    const body = encodeGetReq(7, "b", "k");
    // u64 request id, u16 len + bucket, u16 len + key
    expect(body).toEqual(
      Buffer.from([7, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0x62, 1, 0, 0x6b]),
    );
  });

  it("get response round trip", () => {
    const body = Buffer.alloc(26);
    body.writeBigUInt64LE(9n, 0);
    body.writeUInt8(Status.OK, 8);
    body.writeUInt8(TransferMode.RING, 9);
    body.writeBigUInt64LE(64n, 10);
    body.writeBigUInt64LE(1048576n, 18);
    expect(decodeGetResp(body)).toEqual({
      requestId: 9,
      status: Status.OK,
      mode: TransferMode.RING,
      offset: 64,
      length: 1048576,
    });
  });

  it("put alloc layout", () => {
    const body = encodePutAlloc(3, "b", "k", 100, true);
    expect(body.readBigUInt64LE(0)).toBe(3n);
    expect(body.readUInt8(8)).toBe(PutPhase.ALLOC);
    expect(body.readUInt8(9)).toBe(1);
    expect(body.readBigUInt64LE(10)).toBe(100n);
  });

  it("put commit layout", () => {
    const body = encodePutCommit(4, 0xdeadbeef);
    expect(body.readUInt8(8)).toBe(PutPhase.COMMIT);
    expect(body.readBigUInt64LE(9)).toBe(0xdeadbeefn);
  });

  it("put ack decode", () => {
    const body = Buffer.alloc(18);
    body.writeBigUInt64LE(5n, 0);
    body.writeUInt8(Status.OK, 8);
    body.writeUInt8(PutKind.COMPLETED, 9);
    body.writeBigUInt64LE(12n, 10);
    expect(decodePutAck(body)).toEqual({
      requestId: 5,
      status: Status.OK,
      kind: PutKind.COMPLETED,
      value: 12,
    });
  });

  it("stream frames round trip", () => {
    expect(decodeStreamOpen(encodeStreamOpen(1, 99))).toEqual({
      requestId: 1,
      totalLength: 99,
    });
    expect(decodeStreamClose(encodeStreamClose(1, Status.OK, 99))).toEqual({
      requestId: 1,
      status: Status.OK,
      totalLength: 99,
    });
  });
});
