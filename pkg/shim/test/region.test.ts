import * as fs from "fs";
import * as os from "os";
import * as path from "path";
import { afterEach, describe, expect, it } from "vitest";

import { AttachError, HEADER_BYTES, MAGIC, RING_CTRL_BYTES, Region } from "../src/region";

const cleanups: string[] = [];

/** Build a region file exactly as the backend lays it out. */
function makeRegionFile(ringCapacity: number, slotBytes = 0): string {
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), "nexus-shim-"));
  const file = path.join(dir, "nexus-region-1");
  const ringArea = HEADER_BYTES + slotBytes;
  const total = ringArea + 2 * (RING_CTRL_BYTES + ringCapacity);
  const buf = Buffer.alloc(Math.ceil(total / 4096) * 4096);
  buf.writeBigUInt64LE(MAGIC, 0);
  buf.writeUInt32LE(1, 8); // version
  buf.writeUInt32LE(ringCapacity ? 1 : 0, 12); // mode
  buf.writeBigUInt64LE(BigInt(HEADER_BYTES), 16); // alloc cursor
  buf.writeBigUInt64LE(BigInt(ringArea), 24);
  buf.writeBigUInt64LE(BigInt(ringCapacity), 32);
  for (const block of [ringArea, ringArea + RING_CTRL_BYTES + ringCapacity]) {
    buf.writeBigUInt64LE(BigInt(ringCapacity), block);
  }
  fs.writeFileSync(file, buf);
  cleanups.push(dir);
  return file;
}

afterEach(() => {
  while (cleanups.length) {
    fs.rmSync(cleanups.pop()!, { recursive: true, force: true });
  }
});

describe("region attach", () => {
  it("validates magic", () => {
    const file = makeRegionFile(64);
    const fd = fs.openSync(file, "r+");
    fs.writeSync(fd, Buffer.alloc(8), 0, 8, 0);
    fs.closeSync(fd);
    expect(() => new Region(file)).toThrow(AttachError);
  });

  it("validates version", () => {
    const file = makeRegionFile(64);
    const fd = fs.openSync(file, "r+");
    const bad = Buffer.alloc(4);
    bad.writeUInt32LE(9, 0);
    fs.writeSync(fd, bad, 0, 4, 8);
    fs.closeSync(fd);
    expect(() => new Region(file)).toThrow(/version/);
  });

  it("exposes layout fields", () => {
    const region = new Region(makeRegionFile(128, 256));
    expect(region.ringAreaOffset).toBe(HEADER_BYTES + 256);
    expect(region.ringCapacity).toBe(128);
    expect(region.downRing!.capacity).toBe(128);
    region.close();
  });

  it("reads and writes windows", () => {
    const region = new Region(makeRegionFile(64, 256));
    region.write(HEADER_BYTES, Buffer.from("hello"));
    expect(region.read(HEADER_BYTES, 5).toString()).toBe("hello");
    expect(() => region.read(region.sizeBytes - 1, 2)).toThrow(AttachError);
    region.close();
  });
});

describe("ring", () => {
  it("fifo order with wrap-around", () => {
    const region = new Region(makeRegionFile(8));
    const ring = region.downRing!;
    expect(ring.write(Buffer.from("abcdef"))).toBe(6);
    expect(ring.read(6).toString()).toBe("abcdef");
    expect(ring.write(Buffer.from("ABCDE"))).toBe(5); // spans the wrap
    expect(ring.read(5).toString()).toBe("ABCDE");
    region.close();
  });

  it("partial write on a nearly full ring", () => {
    const region = new Region(makeRegionFile(8));
    const ring = region.upRing!;
    expect(ring.write(Buffer.from("0123456"))).toBe(7);
    expect(ring.write(Buffer.from("xyz"))).toBe(1);
    expect(ring.write(Buffer.from("q"))).toBe(0); // full
    expect(ring.read(16).toString()).toBe("0123456x");
    region.close();
  });

  it("occupancy stays within capacity", () => {
    const region = new Region(makeRegionFile(16));
    const ring = region.downRing!;
    for (let i = 0; i < 100; i++) {
      ring.write(Buffer.from([i]));
      const used = ring.used();
      expect(used).toBeGreaterThanOrEqual(0);
      expect(used).toBeLessThanOrEqual(16);
      if (i % 3 === 0) ring.read(2);
    }
    region.close();
  });
});

describe("cross-language payload derivation", () => {
  it("matches the Python reference vector", async () => {
    const { deterministicBytes } = await import("../src/guest");
    // reference: sha256(seed + "bucket/key") repeated; first bytes checked
    // against the Python implementation for seed 0x11*16
    const seed = Buffer.alloc(16, 0x11);
    const out = deterministicBytes(seed, "b", "out", 40);
    const { createHash } = await import("crypto");
    const block = createHash("sha256")
      .update(Buffer.concat([seed, Buffer.from("b/out")]))
      .digest();
    expect(out.subarray(0, 32)).toEqual(block);
    expect(out.subarray(32, 40)).toEqual(block.subarray(0, 8));
    expect(out.length).toBe(40);
  });
});
