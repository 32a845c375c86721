/**
 * Guest entry point: the same synthetic handler the Python guest runs,
 * driven through the shim client. The backend spawns this via the
 * guest_runtimes config key; startup parameters arrive as flags with
 * NEXUS_CONTROL / NEXUS_REGION as fallbacks.
 */

import { createHash } from "crypto";
import { ShimClient, NoSuchKey, bodyToBuffer } from "./client";
import { TransportError } from "./channel";

interface Args {
  control: string;
  region: string;
  fn: string;
  mode: string;
  idleTimeoutS: number;
}

function parseArgs(argv: string[]): Args {
  const args: Args = {
    control: process.env.NEXUS_CONTROL ?? "",
    region: process.env.NEXUS_REGION ?? "",
    fn: "",
    mode: "offloaded",
    idleTimeoutS: 30,
  };
  for (let i = 0; i < argv.length; i++) {
    const next = () => argv[++i];
    switch (argv[i]) {
      case "--control":
        args.control = next();
        break;
      case "--region":
        args.region = next();
        break;
      case "--function":
        args.fn = next();
        break;
      case "--mode":
        args.mode = next();
        break;
      case "--store":
        next(); // coupled-only parameter; the shim never runs coupled
        break;
      case "--idle-timeout-s":
        args.idleTimeoutS = parseFloat(next());
        break;
    }
  }
  return args;
}

/** Matches the Python guest: payload derived from the idempotency key so a
 * retried invocation writes identical bytes. */
export function deterministicBytes(seedKey: Buffer, bucket: string, key: string, length: number): Buffer {
  const block = createHash("sha256")
    .update(Buffer.concat([seedKey, Buffer.from(`${bucket}/${key}`, "utf8")]))
    .digest();
  const reps = Math.floor(length / block.length) + 1;
  return Buffer.concat(Array(reps).fill(block)).subarray(0, length);
}

function busySpin(computeUs: number): void {
  const deadline = process.hrtime.bigint() + BigInt(Math.round(computeUs * 1000));
  while (process.hrtime.bigint() < deadline) {
    /* spin */
  }
}

const monoUs = () => Number(process.hrtime.bigint() / 1000n);

async function runInvocation(client: ShimClient, envelope: {
  idempotencyKey: Buffer;
  eventBody: Buffer;
}, asyncPuts: boolean): Promise<{ status: "ok" | "error"; payload: Buffer; metrics: object }> {
  let event: { compute_us?: number; inputs?: { bucket: string; key: string }[]; output?: { bucket: string; key: string; size_bytes?: number } | null };
  try {
    event = JSON.parse(envelope.eventBody.toString("utf8") || "{}");
  } catch {
    event = {};
  }
  const metrics: Record<string, unknown> = { get_wait_us: 0, put_wait_us: 0, exec_us: 0 };
  const digests: object[] = [];
  const t0 = monoUs();
  try {
    for (const input of event.inputs ?? []) {
      const start = monoUs();
      const result = await client.getObject({ Bucket: input.bucket, Key: input.key });
      const data = await bodyToBuffer(result.Body);
      metrics.get_wait_us = (metrics.get_wait_us as number) + (monoUs() - start);
      digests.push({
        ref: `${input.bucket}/${input.key}`,
        sha256: createHash("sha256").update(data).digest("hex"),
        length: data.length,
      });
    }
    const spinStart = monoUs();
    busySpin(event.compute_us ?? 0);
    metrics.exec_us = monoUs() - spinStart;

    let version: string | null = null;
    let delegated = false;
    if (event.output) {
      const out = event.output;
      const data = deterministicBytes(
        envelope.idempotencyKey, out.bucket, out.key, out.size_bytes ?? 0);
      const start = monoUs();
      const ack = await client.putObject({
        Bucket: out.bucket, Key: out.key, Body: data, Async: asyncPuts,
      });
      metrics.put_wait_us = monoUs() - start;
      version = ack.Delegated ? null : ack.VersionId;
      delegated = ack.Delegated;
    }
    metrics.handler_us = monoUs() - t0;
    metrics.runtime = "node-shim";
    const payload = Buffer.from(JSON.stringify({
      inputs: digests,
      output_version: version !== null ? Number(version) : null,
      output_delegated: delegated,
    }));
    return { status: "ok", payload, metrics };
  } catch (err) {
    metrics.handler_us = monoUs() - t0;
    const label = err instanceof NoSuchKey ? err.message : `${(err as Error).name ?? "Error"}: ${(err as Error).message}`;
    return { status: "error", payload: Buffer.from(label), metrics };
  }
}

async function main(): Promise<number> {
  const args = parseArgs(process.argv.slice(2));
  if (!args.control) {
    process.stderr.write("--control or NEXUS_CONTROL required\n");
    return 2;
  }
  const client = await ShimClient.attach(args.control, args.region || undefined);
  try {
    for (;;) {
      let envelope;
      try {
        envelope = await client.recvInvoke(args.idleTimeoutS * 1000);
      } catch (err) {
        if (err instanceof TransportError && /timed out/.test(err.message)) return 0;
        return 1; // channel gone; the backend owns recovery
      }
      const tRecv = monoUs();
      const result = await runInvocation(client, envelope, args.mode === "offloaded-async");
      const metrics = {
        ...(result.metrics as object),
        t_invoke_recv_us: tRecv,
        t_respond_us: monoUs(),
      };
      await client.respond(result.status, result.payload, metrics);
    }
  } finally {
    client.close();
  }
}

if (require.main === module) {
  main().then(
    (code) => process.exit(code),
    (err) => {
      process.stderr.write(`${err}\n`);
      process.exit(1);
    },
  );
}
