/**
 * Review queue controller: DOM-free state machine behind the UI.
 *
 * The whole view is reconstructable from server responses: the controller
 * never counts on its own, it mirrors the service's progress payloads.
 */

import { ApiError, CurationApi, Decision, Progress, TileSummary } from "./api.js";

export type Phase = "loading" | "reviewing" | "empty" | "offline";

export interface HistoryEntry {
  tile_id: string;
  decision: Decision;
  artifact_tag: string;
}

export interface ViewState {
  phase: Phase;
  current: TileSummary | null;
  progress: Progress | null;
  history: HistoryEntry[];
  tagDraft: string;
  notice: string | null;
}

export class ReviewController {
  private state: ViewState = {
    phase: "loading",
    current: null,
    progress: null,
    history: [],
    tagDraft: "",
    notice: null,
  };
  private listeners: Array<(s: ViewState) => void> = [];

  constructor(private api: CurationApi) {}

  snapshot(): ViewState {
    return {
      ...this.state,
      history: [...this.state.history],
    };
  }

  onChange(listener: (s: ViewState) => void): void {
    this.listeners.push(listener);
  }

  private update(patch: Partial<ViewState>): void {
    this.state = { ...this.state, ...patch };
    const snap = this.snapshot();
    for (const listener of this.listeners) listener(snap);
  }

  /**
   * Load the next pending pair (or the empty/offline screens).
   *
   * `excludeTileId` makes the optimistic advance correct: the list request
   * may race the decision POST, so the just-decided tile is skipped locally.
   */
  async fetchNext(excludeTileId?: string): Promise<void> {
    this.update({ phase: "loading", notice: null });
    try {
      const [page, progress] = await Promise.all([
        this.api.listTiles("pending", 2, 0),
        this.api.progress(),
      ]);
      const next = page.items.find((t) => t.tile_id !== excludeTileId) ?? null;
      if (!next) {
        this.update({ phase: "empty", current: null, progress });
      } else {
        this.update({ phase: "reviewing", current: next, progress });
      }
    } catch (err) {
      if (err instanceof ApiError) {
        this.update({ phase: "reviewing", notice: `server error: ${err.message}` });
      } else {
        // network failure: keep everything, show the retry banner
        this.update({ phase: "offline" });
      }
    }
  }

  retry(): Promise<void> {
    return this.fetchNext();
  }

  setTagDraft(text: string): void {
    this.update({ tagDraft: text });
  }

  /**
   * Submit a decision for the displayed pair: optimistic advance, rollback
   * with an inline notice if the server rejects it.
   */
  async submitDecision(decision: "kept" | "dropped"): Promise<void> {
    const tile = this.state.current;
    if (!tile || this.state.phase !== "reviewing") return;
    const tag = this.state.tagDraft.trim();
    const optimistic: HistoryEntry = {
      tile_id: tile.tile_id,
      decision,
      artifact_tag: tag,
    };
    this.update({
      history: [...this.state.history, optimistic],
      tagDraft: "",
    });
    const advance = this.fetchNext(tile.tile_id); // optimistic advance
    try {
      const resp = await this.api.postDecision(tile.tile_id, decision, tag || undefined);
      await advance;
      // displayed counts always come from the service
      this.update({ progress: resp.counts });
    } catch (err) {
      await advance.catch(() => undefined);
      // rollback: decision did not land, put the pair back
      this.update({
        history: this.state.history.filter((h) => h !== optimistic),
        current: tile,
        phase: "reviewing",
        tagDraft: tag,
        notice: err instanceof ApiError ? `decision rejected: ${err.message}` : "network failure",
      });
    }
  }

  /** Undo the most recent decision: a second POST restores pending. */
  async undo(): Promise<void> {
    const last = this.state.history[this.state.history.length - 1];
    if (!last) return;
    try {
      const resp = await this.api.postDecision(last.tile_id, "pending");
      const restored = await this.api.getTile(last.tile_id);
      this.update({
        history: this.state.history.slice(0, -1),
        current: restored,
        phase: "reviewing",
        progress: resp.counts,
        notice: null,
      });
    } catch (err) {
      this.update({
        notice: err instanceof ApiError ? `undo rejected: ${err.message}` : "network failure",
      });
    }
  }

  /** Re-read counts from the service (drift guard). */
  async refreshProgress(): Promise<void> {
    try {
      this.update({ progress: await this.api.progress() });
    } catch {
      this.update({ phase: "offline" });
    }
  }
}

/** Keyboard mapping shared by the DOM layer and the scripted-session tests. */
export function handleKey(
  controller: ReviewController,
  key: string,
  typingInTagField: boolean,
): "keep" | "drop" | "undo" | "tag-focus" | null {
  if (typingInTagField) return null; // the tag field owns the keystrokes
  switch (key.toLowerCase()) {
    case "k":
      void controller.submitDecision("kept");
      return "keep";
    case "d":
      void controller.submitDecision("dropped");
      return "drop";
    case "u":
      void controller.undo();
      return "undo";
    case "t":
      return "tag-focus";
    default:
      return null;
  }
}
