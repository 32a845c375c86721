/** Framed Unix-domain-socket channel with an awaitable receive queue. */

import * as net from "net";
import { Frame, FrameParser, encodeFrame } from "./proto";

const sleep = (ms: number) => new Promise<void>((resolve) => setTimeout(resolve, ms));

export class TransportError extends Error {}

export class Channel {
  private queue: Frame[] = [];
  private waiter: {
    resolve: (f: Frame) => void;
    reject: (e: Error) => void;
    timer?: NodeJS.Timeout;
  } | null = null;
  private closed = false;

  private constructor(private readonly socket: net.Socket) {
    const parser = new FrameParser();
    socket.on("data", (chunk: Buffer) => {
      for (const frame of parser.feed(chunk)) this.dispatch(frame);
    });
    const fail = () => {
      this.closed = true;
      if (this.waiter) {
        const waiter = this.waiter;
        this.waiter = null;
        if (waiter.timer) clearTimeout(waiter.timer);
        waiter.reject(new TransportError("control channel closed"));
      }
    };
    socket.on("error", fail);
    socket.on("close", fail);
  }

  static async connect(path: string, retries = 25, backoffMs = 200): Promise<Channel> {
    let last: unknown = null;
    for (let attempt = 0; attempt < retries; attempt++) {
      try {
        const socket = await new Promise<net.Socket>((resolve, reject) => {
          const sock = net.createConnection(path);
          sock.once("connect", () => {
            sock.removeAllListeners("error");
            resolve(sock);
          });
          sock.once("error", reject);
        });
        return new Channel(socket);
      } catch (err) {
        last = err;
        await sleep(backoffMs * Math.min(attempt + 1, 5));
      }
    }
    throw new TransportError(`cannot connect control channel ${path}: ${last}`);
  }

  private dispatch(frame: Frame): void {
    if (this.waiter) {
      const waiter = this.waiter;
      this.waiter = null;
      if (waiter.timer) clearTimeout(waiter.timer);
      waiter.resolve(frame);
    } else {
      this.queue.push(frame);
    }
  }

  send(type: number, body: Buffer): void {
    if (this.closed) throw new TransportError("control channel closed");
    this.socket.write(encodeFrame(type, body));
  }

  recv(timeoutMs?: number): Promise<Frame> {
    const queued = this.queue.shift();
    if (queued) return Promise.resolve(queued);
    if (this.closed) return Promise.reject(new TransportError("control channel closed"));
    if (this.waiter) return Promise.reject(new TransportError("concurrent recv"));
    return new Promise<Frame>((resolve, reject) => {
      const waiter: { resolve: typeof resolve; reject: typeof reject; timer?: NodeJS.Timeout } = {
        resolve,
        reject,
      };
      if (timeoutMs !== undefined) {
        waiter.timer = setTimeout(() => {
          if (this.waiter === waiter) this.waiter = null;
          reject(new TransportError("recv timed out"));
        }, timeoutMs);
      }
      this.waiter = waiter;
    });
  }

  close(): void {
    this.closed = true;
    this.socket.destroy();
  }
}
