/**
 * Scripted review session against the real curation service.
 *
 * Spawns the Python service on a synthetic 20-tile manifest, drives the UI
 * controller exactly as the keyboard flow would (12 keeps, 8 drops, two
 * tags, one undo), checks the displayed progress against /api/progress at
 * every step, and finally verifies the on-disk manifest matches the script.
 */

import { spawn, ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { CurationApi } from "../src/api.js";
import { ReviewController } from "../src/state.js";

const PORT = 17000 + (process.pid % 8000);
const BASE = `http://127.0.0.1:${PORT}`;

let service: ChildProcess;
let workDir: string;

async function waitForService(): Promise<void> {
  for (let attempt = 0; attempt < 100; attempt++) {
    try {
      const resp = await fetch(`${BASE}/api/progress`);
      if (resp.ok) return;
    } catch {
      /* not up yet */
    }
    await new Promise((resolve) => setTimeout(resolve, 150));
  }
  throw new Error("curation service did not come up");
}

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "stainbench-session-"));
  service = spawn(
    "python3",
    [join(__dirname, "fixtures", "serve_session.py"),
     "--dir", workDir, "--port", String(PORT)],
    { stdio: "inherit" },
  );
  await waitForService();
}, 30_000);

afterAll(() => {
  service?.kill("SIGTERM");
  rmSync(workDir, { recursive: true, force: true });
});

interface ScriptStep {
  decision: "kept" | "dropped";
  tag?: string;
}

function buildScript(): ScriptStep[] {
  const steps: ScriptStep[] = [];
  for (let i = 0; i < 20; i++) {
    if (i < 12) steps.push({ decision: "kept" });
    else if (i === 12) steps.push({ decision: "dropped", tag: "dark-shade" });
    else if (i === 13) steps.push({ decision: "dropped", tag: "section doubling" });
    else steps.push({ decision: "dropped" });
  }
  return steps;
}

function parseManifest(path: string): Map<string, { status: string; tag: string }> {
  const rows = new Map<string, { status: string; tag: string }>();
  for (const line of readFileSync(path, "utf-8").split("\n")) {
    if (!line || line.startsWith("#")) continue;
    const fields = line.split("\t");
    rows.set(fields[0], { status: fields[6], tag: fields[7] ?? "" });
  }
  return rows;
}

describe("scripted curation session", () => {
  it("reviews 20 tiles with 12 keeps / 8 drops / 2 tags and one undo", async () => {
    const api = new CurationApi(BASE);
    const controller = new ReviewController(api);
    await controller.fetchNext();
    expect(controller.snapshot().current?.tile_id).toBe("t00");

    const script = buildScript();
    const decided = new Map<string, ScriptStep>();
    for (const step of script) {
      const state = controller.snapshot();
      expect(state.phase).toBe("reviewing");
      const tileId = state.current!.tile_id;
      if (step.tag) controller.setTagDraft(step.tag);
      await controller.submitDecision(step.decision);
      decided.set(tileId, step);

      // displayed counts must equal the service's /api/progress every step
      const displayed = controller.snapshot().progress;
      const serverSide = await api.progress();
      expect(displayed).toEqual(serverSide);
    }
    expect(controller.snapshot().phase).toBe("empty");
    expect([...decided.values()].filter((s) => s.decision === "kept")).toHaveLength(12);
    expect([...decided.values()].filter((s) => s.decision === "dropped")).toHaveLength(8);

    // undo the final decision: the tile returns to pending on the server
    const lastTile = controller.snapshot().history.at(-1)!.tile_id;
    await controller.undo();
    expect(controller.snapshot().current?.tile_id).toBe(lastTile);
    const pendingAgain = await api.getTile(lastTile);
    expect(pendingAgain.status).toBe("pending");
    expect(controller.snapshot().progress).toEqual(await api.progress());

    // redo it so the manifest matches the script exactly
    const redo = decided.get(lastTile)!;
    if (redo.tag) controller.setTagDraft(redo.tag);
    await controller.submitDecision(redo.decision);
    expect(controller.snapshot().phase).toBe("empty");

    const manifest = parseManifest(join(workDir, "curation.tsv"));
    expect(manifest.size).toBe(20);
    for (const [tileId, step] of decided) {
      expect(manifest.get(tileId)?.status).toBe(step.decision);
      if (step.tag) expect(manifest.get(tileId)?.tag).toBe(step.tag);
    }
    const finalProgress = await api.progress();
    expect(finalProgress).toEqual({ total: 20, pending: 0, kept: 12, dropped: 8 });
  }, 60_000);
});
