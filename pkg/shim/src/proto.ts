/**
 * Control-plane codec: framing plus the sandbox-scope message bodies.
 * Byte layouts follow PROTOCOL.md exactly (little endian throughout); a
 * capture of frames produced here must decode with the Python decoder.
 */

export const MAX_FRAME_LEN = 16 * 1024 * 1024;

export enum MessageType {
  INGRESS_INVOKE = 0x01,
  INGRESS_RESPONSE = 0x02,
  INVOKE = 0x10,
  GET_REQ = 0x11,
  GET_RESP = 0x12,
  PUT_REQ = 0x13,
  PUT_ACK = 0x14,
  FN_RESPONSE = 0x15,
  STREAM_OPEN = 0x16,
  STREAM_CLOSE = 0x17,
  ERROR = 0x7f,
}

export enum Status {
  OK = 0,
  NOT_FOUND = 1,
  ERROR = 2,
  REGION_FULL = 3,
  ILLEGAL = 4,
}

export enum TransferMode {
  SLOT = 0,
  RING = 1,
}

export enum PutKind {
  GRANT_SLOT = 0,
  GRANT_RING = 1,
  DELEGATED = 2,
  COMPLETED = 3,
}

export enum PutPhase {
  ALLOC = 0,
  COMMIT = 1,
}

export interface Frame {
  type: number;
  body: Buffer;
}

export function encodeFrame(type: number, body: Buffer): Buffer {
  if (1 + body.length > MAX_FRAME_LEN) {
    throw new Error(`frame body of ${body.length} bytes exceeds limit`);
  }
  const header = Buffer.alloc(5);
  header.writeUInt32LE(1 + body.length, 0);
  header.writeUInt8(type, 4);
  return Buffer.concat([header, body]);
}

/** Incremental frame parser for a byte stream. */
export class FrameParser {
  private pending: Buffer = Buffer.alloc(0);

  feed(chunk: Buffer): Frame[] {
    this.pending = this.pending.length ? Buffer.concat([this.pending, chunk]) : chunk;
    const frames: Frame[] = [];
    for (;;) {
      if (this.pending.length < 4) break;
      const length = this.pending.readUInt32LE(0);
      if (length < 1 || length > MAX_FRAME_LEN) {
        throw new Error(`bad frame length ${length}`);
      }
      if (this.pending.length < 4 + length) break;
      frames.push({
        type: this.pending.readUInt8(4),
        body: this.pending.subarray(5, 4 + length),
      });
      this.pending = this.pending.subarray(4 + length);
    }
    return frames;
  }
}

class Cursor {
  pos = 0;
  constructor(private readonly body: Buffer) {}

  take(n: number): Buffer {
    if (this.pos + n > this.body.length) throw new Error("truncated body");
    const out = this.body.subarray(this.pos, this.pos + n);
    this.pos += n;
    return out;
  }
  u8(): number {
    return this.take(1).readUInt8(0);
  }
  u16(): number {
    return this.take(2).readUInt16LE(0);
  }
  u32(): number {
    return this.take(4).readUInt32LE(0);
  }
  u64(): number {
    const value = this.take(8).readBigUInt64LE(0);
    if (value > BigInt(Number.MAX_SAFE_INTEGER)) throw new Error("u64 out of range");
    return Number(value);
  }
  str(): string {
    return this.take(this.u16()).toString("utf8");
  }
  done(): void {
    if (this.pos !== this.body.length) throw new Error("trailing bytes");
  }
}

function packStr(value: string): Buffer {
  const raw = Buffer.from(value, "utf8");
  const out = Buffer.alloc(2 + raw.length);
  out.writeUInt16LE(raw.length, 0);
  raw.copy(out, 2);
  return out;
}

function u64(value: number): Buffer {
  const out = Buffer.alloc(8);
  out.writeBigUInt64LE(BigInt(value), 0);
  return out;
}

export interface InputHint {
  bucket: string;
  key: string;
  sizeBytes: number | null;
}

export interface Envelope {
  invocationId: Buffer;
  idempotencyKey: Buffer;
  fn: string;
  inputHints: InputHint[];
  outputHints: { bucket: string; key: string }[];
  eventBody: Buffer;
}

export function decodeInvoke(body: Buffer): Envelope {
  const cur = new Cursor(body);
  const invocationId = Buffer.from(cur.take(16));
  const idempotencyKey = Buffer.from(cur.take(16));
  const fn = cur.str();
  const inputHints: InputHint[] = [];
  const nInputs = cur.u16();
  for (let i = 0; i < nInputs; i++) {
    const bucket = cur.str();
    const key = cur.str();
    const hasSize = cur.u8();
    const size = cur.u64();
    inputHints.push({ bucket, key, sizeBytes: hasSize ? size : null });
  }
  const outputHints: { bucket: string; key: string }[] = [];
  const nOutputs = cur.u16();
  for (let i = 0; i < nOutputs; i++) {
    outputHints.push({ bucket: cur.str(), key: cur.str() });
  }
  const eventBody = Buffer.from(cur.take(cur.u32()));
  cur.done();
  return { invocationId, idempotencyKey, fn, inputHints, outputHints, eventBody };
}

export function encodeGetReq(requestId: number, bucket: string, key: string): Buffer {
  return Buffer.concat([u64(requestId), packStr(bucket), packStr(key)]);
}

export interface GetResp {
  requestId: number;
  status: Status;
  mode: TransferMode;
  offset: number;
  length: number;
}

export function decodeGetResp(body: Buffer): GetResp {
  const cur = new Cursor(body);
  const resp = {
    requestId: cur.u64(),
    status: cur.u8() as Status,
    mode: cur.u8() as TransferMode,
    offset: cur.u64(),
    length: cur.u64(),
  };
  cur.done();
  return resp;
}

export function encodePutAlloc(
  requestId: number,
  bucket: string,
  key: string,
  dataLen: number,
  asynchronous: boolean,
): Buffer {
  return Buffer.concat([
    u64(requestId),
    Buffer.from([PutPhase.ALLOC, asynchronous ? 1 : 0]),
    u64(dataLen),
    packStr(bucket),
    packStr(key),
  ]);
}

export function encodePutCommit(requestId: number, checksum = 0): Buffer {
  return Buffer.concat([u64(requestId), Buffer.from([PutPhase.COMMIT]), u64(checksum)]);
}

export interface PutAck {
  requestId: number;
  status: Status;
  kind: PutKind;
  value: number;
}

export function decodePutAck(body: Buffer): PutAck {
  const cur = new Cursor(body);
  const ack = {
    requestId: cur.u64(),
    status: cur.u8() as Status,
    kind: cur.u8() as PutKind,
    value: cur.u64(),
  };
  cur.done();
  return ack;
}

export function encodeFnResponse(
  invocationId: Buffer,
  status: Status,
  payload: Buffer,
  metrics: object,
): Buffer {
  const rawMetrics = Buffer.from(JSON.stringify(metrics), "utf8");
  const head = Buffer.alloc(5);
  head.writeUInt8(status, 0);
  head.writeUInt32LE(payload.length, 1);
  const mid = Buffer.alloc(4);
  mid.writeUInt32LE(rawMetrics.length, 0);
  return Buffer.concat([invocationId, head, payload, mid, rawMetrics]);
}

export function encodeStreamOpen(requestId: number, totalLength: number): Buffer {
  return Buffer.concat([u64(requestId), u64(totalLength)]);
}

export function decodeStreamOpen(body: Buffer): { requestId: number; totalLength: number } {
  const cur = new Cursor(body);
  const out = { requestId: cur.u64(), totalLength: cur.u64() };
  cur.done();
  return out;
}

export function encodeStreamClose(requestId: number, status: Status, totalLength: number): Buffer {
  return Buffer.concat([u64(requestId), Buffer.from([status]), u64(totalLength)]);
}

export function decodeStreamClose(body: Buffer): {
  requestId: number;
  status: Status;
  totalLength: number;
} {
  const cur = new Cursor(body);
  const out = { requestId: cur.u64(), status: cur.u8() as Status, totalLength: cur.u64() };
  cur.done();
  return out;
}

export function decodeError(body: Buffer): { code: number; detail: string } {
  const cur = new Cursor(body);
  const code = cur.u8();
  const detail = cur.take(cur.u16()).toString("utf8");
  cur.done();
  return { code, detail };
}
