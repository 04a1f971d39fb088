// Full round trip against a live service: create a session, paint a
// background edit through the brush/commit code path, step twice, export the
// composite, and check it is byte-identical to a server-side export produced
// by replaying the same operations directly.
//
// Requires python + the invcomp package and a checkpoint; run via
// `npm run test:integration` (set INVCOMP_CHECKPOINT to pick the weights).

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, existsSync } from "node:fs";
import { createServer } from "node:net";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { BrushState, RasterEncoder, buildCommit } from "../src/brush.js";
import { planeToBase64 } from "./png.js";

const RUN = process.env.RUN_INTEGRATION === "1";
const PYTHON = process.env.PYTHON ?? "python3";
const REPO_ROOT = resolve(__dirname, "..", "..");
const CHECKPOINT =
  process.env.INVCOMP_CHECKPOINT ?? join(REPO_ROOT, "checkpoints", "desk.rimw");

const nodeEncoder: RasterEncoder = {
  encodeGray: (data, w, h) => planeToBase64(data, w, h, 1),
  encodeRgb: (data, w, h) => planeToBase64(data, w, h, 3),
};

function freePort(): Promise<number> {
  return new Promise((resolvePort) => {
    const srv = createServer();
    srv.listen(0, "127.0.0.1", () => {
      const port = (srv.address() as { port: number }).port;
      srv.close(() => resolvePort(port));
    });
  });
}

describe.runIf(RUN)("editor round trip against a live service", () => {
  let server: ChildProcess;
  let api: ApiClient;
  let base: string;
  let imageB64: string;
  let alphaB64: string;

  beforeAll(async () => {
    expect(existsSync(CHECKPOINT), `checkpoint missing at ${CHECKPOINT}`).toBe(true);
    const dataDir = mkdtempSync(join(tmpdir(), "invcomp-ui-"));
    const gen = spawnSync(
      PYTHON,
      ["-m", "invcomp.cli", "datagen", "--out", dataDir, "--count", "1",
       "--set", "augment.base_size=96", "--set", "augment.resize_size=64",
       "--set", "augment.crop=48", "--set", "augment.dilation_max=4"],
      { encoding: "utf-8" },
    );
    expect(gen.status, gen.stderr).toBe(0);
    imageB64 = readFileSync(join(dataDir, "sample_00000", "image.png")).toString("base64");
    alphaB64 = readFileSync(join(dataDir, "sample_00000", "initial_alpha.png")).toString("base64");

    const port = await freePort();
    base = `http://127.0.0.1:${port}`;
    server = spawn(PYTHON, ["-m", "invcomp.cli", "serve", "--checkpoint", CHECKPOINT,
                            "--port", String(port)], { stdio: "ignore" });
    api = new ApiClient(base);
    for (let i = 0; i < 150; i++) {
      try {
        await fetch(`${base}/sessions/none`);
        return;
      } catch {
        await new Promise((r) => setTimeout(r, 200));
      }
    }
    throw new Error("service did not come up");
  }, 60_000);

  afterAll(() => {
    server?.kill();
  });

  it("export after paint+commit+step matches a direct server-side replay", async () => {
    // the UI path
    const state = await api.createSession({ image: imageB64, alpha: alphaB64 });
    expect(state.iteration).toBe(0);
    const brush = new BrushState(state.width, state.height);
    brush.radius = 6;
    brush.color = { r: 0.9, g: 0.2, b: 0.1 };
    brush.stroke(10, 14, 30, 20, "background");
    expect(brush.dirtyPixels).toBeGreaterThan(0);
    const payload = buildCommit(brush, "background", nodeEncoder);
    const edit = await api.edit(state.id, payload);
    expect(edit.edited_pixels).toBe(brush.dirtyPixels);
    const stepped = await api.step(state.id, 2);
    expect(stepped.iteration).toBe(2);
    const uiBytes = Buffer.from(await api.fetchExport(state.id, "composite", "black", 16));

    // the server-side replay of the same operations
    const mkJson = (path: string, body: unknown) =>
      fetch(`${base}${path}`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
      }).then((r) => r.json());
    const replay = (await mkJson("/sessions", { image: imageB64, alpha: alphaB64 })) as {
      id: string;
    };
    await mkJson(`/sessions/${replay.id}/edit`, payload);
    await mkJson(`/sessions/${replay.id}/step`, { n: 2 });
    const direct = await fetch(
      `${base}/sessions/${replay.id}/export?what=composite&bg=black&bits=16`,
    );
    const directBytes = Buffer.from(await direct.arrayBuffer());

    expect(uiBytes.equals(directBytes)).toBe(true);
  }, 120_000);

  it("layer previews stay in sync after mutations", async () => {
    const state = await api.createSession({ image: imageB64, alpha: alphaB64 });
    const after = await api.step(state.id, 1);
    expect(after.iteration).toBe(1);
    for (const layer of ["image", "foreground", "background", "alpha", "composite"]) {
      const r = await fetch(`${base}${after.previews[layer]}?rev=${after.revision}`);
      expect(r.status).toBe(200);
      expect(r.headers.get("content-type")).toBe("image/png");
    }
  }, 60_000);

  it("composite preview changes between t=0 and t=5", async () => {
    const state = await api.createSession({ image: imageB64, alpha: alphaB64 });
    const before = Buffer.from(
      await (await fetch(`${base}${state.previews.composite}?rev=${state.revision}`)).arrayBuffer(),
    );
    const after5 = await api.step(state.id, 5);
    const after = Buffer.from(
      await (await fetch(`${base}${after5.previews.composite}?rev=${after5.revision}`)).arrayBuffer(),
    );
    expect(before.equals(after)).toBe(false);
  }, 120_000);

  it("a known session id restores state across a reload", async () => {
    const created = await api.createSession({ image: imageB64, alpha: alphaB64 });
    await api.step(created.id, 2);
    const restored = await api.getState(created.id); // what the reload path fetches
    expect(restored.iteration).toBe(2);
    expect(restored.previews.composite).toContain(created.id);
  }, 60_000);
});
