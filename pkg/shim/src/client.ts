/**
 * Guest-side object-storage client with the conventional cloud-SDK call
 * shape: getObject({Bucket, Key}) resolves to {Body}, putObject({Bucket,
 * Key, Body}) resolves to {VersionId}. A handler body written against the
 * standard SDK client runs against this one unchanged; underneath, calls
 * remote to the shared backend over the control socket and payload bytes
 * move through the shared region.
 *
 * The control endpoint and region path come from NEXUS_CONTROL and
 * NEXUS_REGION when not passed explicitly.
 */

import { Readable } from "stream";
import { Channel, TransportError } from "./channel";
import {
  Envelope,
  MessageType,
  PutKind,
  Status,
  TransferMode,
  decodeError,
  decodeGetResp,
  decodeInvoke,
  decodePutAck,
  decodeStreamClose,
  decodeStreamOpen,
  encodeFnResponse,
  encodeGetReq,
  encodePutAlloc,
  encodePutCommit,
  encodeStreamClose,
  encodeStreamOpen,
} from "./proto";
import { Region } from "./region";

const sleep = (ms: number) => new Promise<void>((resolve) => setTimeout(resolve, ms));
const RING_POLL_MS = 1;

export class NoSuchKey extends Error {
  readonly name = "NoSuchKey";
  constructor(bucket: string, key: string) {
    super(`no such object: ${bucket}/${key}`);
  }
}

export class StoreWriteError extends Error {}

export interface GetObjectRequest {
  Bucket: string;
  Key: string;
}

export interface GetObjectResult {
  Body: Readable;
  ContentLength: number;
}

export interface PutObjectRequest {
  Bucket: string;
  Key: string;
  Body: Buffer | string;
  /** opt-in delegated write; the response to the caller stays gated on the
   * store acknowledgment at the backend */
  Async?: boolean;
}

export interface PutObjectResult {
  VersionId: string;
  Delegated: boolean;
}

export class ShimClient {
  private nextRequestId = 1;
  private invocation: Envelope | null = null;

  private constructor(
    private readonly channel: Channel,
    private readonly region: Region | null,
  ) {}

  static async attach(control?: string, regionPath?: string): Promise<ShimClient> {
    const endpoint = control ?? process.env.NEXUS_CONTROL;
    if (!endpoint) throw new TransportError("NEXUS_CONTROL not set");
    const channel = await Channel.connect(endpoint);
    const path = regionPath ?? process.env.NEXUS_REGION;
    const region = path ? new Region(path) : null;
    return new ShimClient(channel, region);
  }

  async recvInvoke(timeoutMs?: number): Promise<Envelope> {
    for (;;) {
      const frame = await this.channel.recv(timeoutMs);
      if (frame.type === MessageType.INVOKE) {
        this.invocation = decodeInvoke(frame.body);
        return this.invocation;
      }
      if (frame.type === MessageType.ERROR) {
        const { code, detail } = decodeError(frame.body);
        throw new TransportError(`backend error ${code}: ${detail}`);
      }
    }
  }

  private requireActive(): void {
    if (!this.invocation) throw new Error("no invocation active");
  }

  private async expect(type: MessageType): Promise<Buffer> {
    const frame = await this.channel.recv();
    if (frame.type === MessageType.ERROR) {
      const { code, detail } = decodeError(frame.body);
      throw new TransportError(`backend error ${code}: ${detail}`);
    }
    if (frame.type !== type) {
      throw new TransportError(`expected message 0x${type.toString(16)}, got 0x${frame.type.toString(16)}`);
    }
    return frame.body;
  }

  async getObject(params: GetObjectRequest): Promise<GetObjectResult> {
    this.requireActive();
    const requestId = this.nextRequestId++;
    this.channel.send(MessageType.GET_REQ, encodeGetReq(requestId, params.Bucket, params.Key));
    const resp = decodeGetResp(await this.expect(MessageType.GET_RESP));
    if (resp.status === Status.NOT_FOUND) throw new NoSuchKey(params.Bucket, params.Key);
    if (resp.status !== Status.OK) {
      throw new StoreWriteError(`GET failed with status ${resp.status}`);
    }
    if (resp.mode === TransferMode.SLOT) {
      if (!this.region) throw new TransportError("SLOT response without a region");
      const data = this.region.read(resp.offset, resp.length);
      return { Body: Readable.from([data]), ContentLength: resp.length };
    }
    const open = decodeStreamOpen(await this.expect(MessageType.STREAM_OPEN));
    if (open.totalLength !== resp.length) {
      throw new TransportError("stream length disagrees with GET_RESP");
    }
    return { Body: this.ringStream(resp.length), ContentLength: resp.length };
  }

  private ringStream(total: number): Readable {
    const region = this.region;
    if (!region || !region.downRing) throw new TransportError("no downstream ring");
    const ring = region.downRing;
    const channel = this.channel;
    let consumed = 0;
    let closed = false;
    return new Readable({
      read: function (this: Readable) {
        void (async () => {
          try {
            while (consumed < total) {
              const chunk = ring.read(Math.min(256 * 1024, total - consumed));
              if (chunk.length === 0) {
                await sleep(RING_POLL_MS);
                continue;
              }
              consumed += chunk.length;
              if (!this.push(chunk)) return; // wait for the next read() call
            }
            if (!closed) {
              closed = true;
              const body = await channel.recv();
              if (body.type !== MessageType.STREAM_CLOSE) {
                this.destroy(new TransportError("expected STREAM_CLOSE"));
                return;
              }
              const close = decodeStreamClose(body.body);
              if (close.status !== Status.OK || close.totalLength !== total) {
                this.destroy(new StoreWriteError("stream ended abnormally"));
                return;
              }
              this.push(null);
            }
          } catch (err) {
            this.destroy(err as Error);
          }
        })();
      },
    });
  }

  async putObject(params: PutObjectRequest): Promise<PutObjectResult> {
    this.requireActive();
    const data = Buffer.isBuffer(params.Body) ? params.Body : Buffer.from(params.Body);
    const requestId = this.nextRequestId++;
    this.channel.send(
      MessageType.PUT_REQ,
      encodePutAlloc(requestId, params.Bucket, params.Key, data.length, params.Async ?? false),
    );
    const grant = decodePutAck(await this.expect(MessageType.PUT_ACK));
    if (grant.status !== Status.OK) {
      throw new StoreWriteError(`PUT rejected with status ${grant.status}`);
    }
    if (grant.kind === PutKind.GRANT_SLOT) {
      if (!this.region) throw new TransportError("slot grant without a region");
      this.region.write(grant.value, data);
      this.channel.send(MessageType.PUT_REQ, encodePutCommit(requestId));
    } else if (grant.kind === PutKind.GRANT_RING) {
      const ring = this.region?.upRing;
      if (!ring) throw new TransportError("no upstream ring");
      this.channel.send(MessageType.STREAM_OPEN, encodeStreamOpen(requestId, data.length));
      let sent = 0;
      while (sent < data.length) {
        const n = ring.write(data.subarray(sent, sent + ring.capacity));
        if (n === 0) {
          await sleep(RING_POLL_MS);
          continue;
        }
        sent += n;
      }
      this.channel.send(
        MessageType.STREAM_CLOSE,
        encodeStreamClose(requestId, Status.OK, data.length),
      );
    } else {
      throw new TransportError(`unexpected PUT_ACK kind ${grant.kind}`);
    }
    const final = decodePutAck(await this.expect(MessageType.PUT_ACK));
    if (final.status === Status.NOT_FOUND) throw new NoSuchKey(params.Bucket, params.Key);
    if (final.status !== Status.OK) {
      throw new StoreWriteError(`PUT failed with status ${final.status}`);
    }
    if (final.kind === PutKind.DELEGATED) return { VersionId: "0", Delegated: true };
    return { VersionId: String(final.value), Delegated: false };
  }

  async respond(status: "ok" | "error", payload: Buffer, metrics: object = {}): Promise<void> {
    this.requireActive();
    const body = encodeFnResponse(
      this.invocation!.invocationId,
      status === "ok" ? Status.OK : Status.ERROR,
      payload,
      metrics,
    );
    this.channel.send(MessageType.FN_RESPONSE, body);
    this.invocation = null;
  }

  close(): void {
    this.channel.close();
    this.region?.close();
  }
}

export async function bodyToBuffer(body: Readable): Promise<Buffer> {
  const chunks: Buffer[] = [];
  for await (const chunk of body) chunks.push(chunk as Buffer);
  return Buffer.concat(chunks);
}
