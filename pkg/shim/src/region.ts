/**
 * Shared-memory region access from Node via positioned file reads/writes.
 * The backend maps the same file with mmap; Linux keeps read/write and
 * mmap views of one file coherent through the page cache, so pread/pwrite
 * here observe the backend's stores and vice versa. Layout per PROTOCOL.md.
 */

import * as fs from "fs";

export const MAGIC = 0x4e58_5553_4d45_4d30n;
export const VERSION = 1;
export const HEADER_BYTES = 64;
export const RING_CTRL_BYTES = 192;

const OFF_HEAD = 64;
const OFF_TAIL = 128;

export class AttachError extends Error {}

function preadExact(fd: number, length: number, position: number): Buffer {
  const buf = Buffer.alloc(length);
  let done = 0;
  while (done < length) {
    const n = fs.readSync(fd, buf, done, length - done, position + done);
    if (n <= 0) throw new AttachError("short read from region file");
    done += n;
  }
  return buf;
}

function pwriteAll(fd: number, data: Buffer, position: number): void {
  let done = 0;
  while (done < data.length) {
    done += fs.writeSync(fd, data, done, data.length - done, position + done);
  }
}

/** One direction of the streaming fallback; single producer, single consumer. */
export class Ring {
  constructor(
    private readonly fd: number,
    private readonly base: number,
    readonly capacity: number,
  ) {}

  head(): number {
    return Number(preadExact(this.fd, 8, this.base + OFF_HEAD).readBigUInt64LE(0));
  }

  tail(): number {
    return Number(preadExact(this.fd, 8, this.base + OFF_TAIL).readBigUInt64LE(0));
  }

  private publish(offset: number, value: number): void {
    const buf = Buffer.alloc(8);
    buf.writeBigUInt64LE(BigInt(value), 0);
    pwriteAll(this.fd, buf, this.base + offset);
  }

  used(): number {
    return this.tail() - this.head();
  }

  /** Producer side: data bytes land before the new tail publishes. */
  write(src: Buffer): number {
    const tail = this.tail();
    const n = Math.min(src.length, this.capacity - (tail - this.head()));
    if (n <= 0) return 0;
    const pos = tail % this.capacity;
    const first = Math.min(n, this.capacity - pos);
    const data = this.base + RING_CTRL_BYTES;
    pwriteAll(this.fd, src.subarray(0, first), data + pos);
    if (n > first) pwriteAll(this.fd, src.subarray(first, n), data);
    this.publish(OFF_TAIL, tail + n);
    return n;
  }

  /** Consumer side: bytes copy out before the new head publishes. */
  read(maxBytes: number): Buffer {
    const head = this.head();
    const n = Math.min(maxBytes, this.tail() - head);
    if (n <= 0) return Buffer.alloc(0);
    const pos = head % this.capacity;
    const first = Math.min(n, this.capacity - pos);
    const data = this.base + RING_CTRL_BYTES;
    const out = Buffer.alloc(n);
    preadExact(this.fd, first, data + pos).copy(out, 0);
    if (n > first) preadExact(this.fd, n - first, data).copy(out, first);
    this.publish(OFF_HEAD, head + n);
    return out;
  }
}

export class Region {
  readonly fd: number;
  readonly sizeBytes: number;
  readonly mode: number;
  readonly ringAreaOffset: number;
  readonly ringCapacity: number;
  readonly downRing: Ring | null;
  readonly upRing: Ring | null;

  constructor(readonly path: string) {
    try {
      this.fd = fs.openSync(path, "r+");
    } catch (err) {
      throw new AttachError(`cannot open region file ${path}: ${err}`);
    }
    const stat = fs.fstatSync(this.fd);
    this.sizeBytes = stat.size;
    if (this.sizeBytes < HEADER_BYTES) {
      fs.closeSync(this.fd);
      throw new AttachError(`region file ${path} too small`);
    }
    const header = preadExact(this.fd, HEADER_BYTES, 0);
    const magic = header.readBigUInt64LE(0);
    const version = header.readUInt32LE(8);
    if (magic !== MAGIC) {
      fs.closeSync(this.fd);
      throw new AttachError(`bad region magic 0x${magic.toString(16)}`);
    }
    if (version !== VERSION) {
      fs.closeSync(this.fd);
      throw new AttachError(`unsupported region version ${version}`);
    }
    this.mode = header.readUInt32LE(12);
    this.ringAreaOffset = Number(header.readBigUInt64LE(24));
    this.ringCapacity = Number(header.readBigUInt64LE(32));
    if (this.ringCapacity > 0) {
      const block = RING_CTRL_BYTES + this.ringCapacity;
      this.downRing = new Ring(this.fd, this.ringAreaOffset, this.ringCapacity);
      this.upRing = new Ring(this.fd, this.ringAreaOffset + block, this.ringCapacity);
    } else {
      this.downRing = null;
      this.upRing = null;
    }
  }

  read(offset: number, length: number): Buffer {
    if (offset + length > this.sizeBytes) throw new AttachError("view outside region");
    return preadExact(this.fd, length, offset);
  }

  write(offset: number, data: Buffer): void {
    if (offset + data.length > this.sizeBytes) throw new AttachError("write outside region");
    pwriteAll(this.fd, data, offset);
  }

  close(): void {
    fs.closeSync(this.fd);
  }
}
