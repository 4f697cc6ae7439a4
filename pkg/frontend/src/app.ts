/**
 * DOM layer: renders the controller state and forwards input events.
 */

import { CurationApi } from "./api.js";
import { ReviewController, ViewState, handleKey } from "./state.js";
import { SyncedViewer } from "./viewer.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

export function mountApp(baseUrl = ""): ReviewController {
  const api = new CurationApi(baseUrl);
  const controller = new ReviewController(api);
  const viewer = new SyncedViewer();

  const sourceImg = el<HTMLImageElement>("panel-source");
  const targetImg = el<HTMLImageElement>("panel-target");
  const tagInput = el<HTMLInputElement>("tag-input");
  const noticeBox = el<HTMLDivElement>("notice");
  const progressFill = el<HTMLDivElement>("progress-fill");
  const progressText = el<HTMLSpanElement>("progress-text");
  const tileLabel = el<HTMLSpanElement>("tile-label");
  const historyList = el<HTMLUListElement>("history");
  const emptyScreen = el<HTMLDivElement>("empty-screen");
  const offlineBanner = el<HTMLDivElement>("offline-banner");
  const reviewPane = el<HTMLDivElement>("review-pane");

  function applyTransform(): void {
    // one transform string for both panels: pixel-coordinate lock
    sourceImg.style.transform = viewer.css();
    targetImg.style.transform = viewer.css();
  }

  function render(state: ViewState): void {
    offlineBanner.hidden = state.phase !== "offline";
    emptyScreen.hidden = state.phase !== "empty";
    reviewPane.hidden = state.phase !== "reviewing" && state.phase !== "loading";
    noticeBox.textContent = state.notice ?? "";
    noticeBox.hidden = !state.notice;

    if (state.current) {
      tileLabel.textContent =
        `${state.current.tile_id} · case ${state.current.case_id} · HER2 ${state.current.her2_score}`;
      sourceImg.src = api.imageUrl(state.current.tile_id, "source");
      targetImg.src = api.imageUrl(state.current.tile_id, "target");
      viewer.reset();
      applyTransform();
    }
    if (state.progress) {
      const done = state.progress.kept + state.progress.dropped;
      const pct = state.progress.total ? (100 * done) / state.progress.total : 0;
      progressFill.style.width = `${pct}%`;
      progressText.textContent =
        `${done}/${state.progress.total} reviewed · ` +
        `${state.progress.kept} kept · ${state.progress.dropped} dropped · ` +
        `${state.progress.pending} pending`;
    }
    historyList.replaceChildren(
      ...state.history.slice(-8).reverse().map((entry) => {
        const item = document.createElement("li");
        item.textContent = entry.artifact_tag
          ? `${entry.tile_id}: ${entry.decision} (${entry.artifact_tag})`
          : `${entry.tile_id}: ${entry.decision}`;
        return item;
      }),
    );
    if (state.tagDraft !== tagInput.value) tagInput.value = state.tagDraft;
  }

  controller.onChange(render);

  document.addEventListener("keydown", (event) => {
    const typing = document.activeElement === tagInput;
    if (typing && event.key === "Enter") {
      controller.setTagDraft(tagInput.value);
      tagInput.blur();
      return;
    }
    if (typing && event.key === "Escape") {
      tagInput.blur();
      return;
    }
    const action = handleKey(controller, event.key, typing);
    if (action === "tag-focus") {
      event.preventDefault();
      tagInput.focus();
    }
  });
  tagInput.addEventListener("input", () => controller.setTagDraft(tagInput.value));
  el<HTMLButtonElement>("btn-keep").addEventListener("click", () =>
    void controller.submitDecision("kept"));
  el<HTMLButtonElement>("btn-drop").addEventListener("click", () =>
    void controller.submitDecision("dropped"));
  el<HTMLButtonElement>("btn-undo").addEventListener("click", () => void controller.undo());
  el<HTMLButtonElement>("btn-retry").addEventListener("click", () => void controller.retry());

  // wheel zoom + drag pan, applied to both panels through the one transform
  for (const panel of [sourceImg, targetImg]) {
    panel.addEventListener("wheel", (event) => {
      event.preventDefault();
      const rect = panel.getBoundingClientRect();
      viewer.zoomAt(event.clientX - rect.left, event.clientY - rect.top,
                    event.deltaY < 0 ? 1.2 : 1 / 1.2);
      applyTransform();
    });
    let dragging = false;
    let lastX = 0;
    let lastY = 0;
    panel.addEventListener("pointerdown", (event) => {
      dragging = true;
      lastX = event.clientX;
      lastY = event.clientY;
      panel.setPointerCapture(event.pointerId);
    });
    panel.addEventListener("pointermove", (event) => {
      if (!dragging) return;
      viewer.panBy(event.clientX - lastX, event.clientY - lastY);
      lastX = event.clientX;
      lastY = event.clientY;
      applyTransform();
    });
    panel.addEventListener("pointerup", () => {
      dragging = false;
    });
  }

  void controller.fetchNext();
  return controller;
}
