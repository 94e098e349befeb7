/** DOM wiring: two canvas panes (target | optional reference), polarity
 * toggle, threshold slider, undo list, inline error display. All counting
 * logic lives in Controller/ApiClient and is covered by the headless tests.
 */

import { ApiClient } from "./api.js";
import type { DisplayFrame, Gesture } from "./coords.js";
import { markerLabel, renderOverlay } from "./overlay.js";
import { Controller, type ViewState } from "./state.js";
import type { Polarity } from "./types.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function wirePane(
  canvas: HTMLCanvasElement,
  pane: "target" | "reference",
  controller: Controller,
  polarity: () => Polarity,
): void {
  let down: { x: number; y: number } | null = null;
  canvas.addEventListener("pointerdown", (e) => {
    const rect = canvas.getBoundingClientRect();
    down = { x: e.clientX - rect.left, y: e.clientY - rect.top };
  });
  canvas.addEventListener("pointerup", (e) => {
    if (!down) return;
    const rect = canvas.getBoundingClientRect();
    const g: Gesture = {
      downX: down.x,
      downY: down.y,
      upX: e.clientX - rect.left,
      upY: e.clientY - rect.top,
      // shift is the per-gesture modifier flipping the persistent mode
      polarity: e.shiftKey
        ? polarity() === "positive"
          ? "negative"
          : "positive"
        : polarity(),
      pane,
    };
    down = null;
    controller.gesture(g);
  });
}

function frameFor(canvas: HTMLCanvasElement, img: HTMLImageElement): DisplayFrame {
  return {
    canvasW: canvas.width,
    canvasH: canvas.height,
    imageW: img.naturalWidth || 1,
    imageH: img.naturalHeight || 1,
  };
}

export function boot(baseUrl = ""): Controller {
  const targetCanvas = el<HTMLCanvasElement>("target-canvas");
  const referenceCanvas = el<HTMLCanvasElement>("reference-canvas");
  const targetImg = el<HTMLImageElement>("target-img");
  const referenceImg = el<HTMLImageElement>("reference-img");
  const upload = el<HTMLInputElement>("upload");
  const uploadRef = el<HTMLInputElement>("upload-ref");
  const slider = el<HTMLInputElement>("threshold");
  const countLabel = el<HTMLElement>("count");
  const errorLabel = el<HTMLElement>("error");
  const polarityToggle = el<HTMLInputElement>("polarity");
  const undoList = el<HTMLElement>("undo-list");
  const referencePane = el<HTMLElement>("reference-pane");

  const api = new ApiClient(baseUrl);

  const render = (s: ViewState): void => {
    const ctx = targetCanvas.getContext("2d");
    if (ctx) {
      const targetMarkers = [...s.prompts.values()];
      renderOverlay(ctx, controller.targetFrame, s.result, targetMarkers);
    }
    countLabel.textContent = String(controller.displayedCount());
    errorLabel.textContent = s.inlineError ?? "";
    slider.disabled = !controller.thresholdEnabled();
    referencePane.hidden = !s.crossImageMode;

    undoList.replaceChildren(
      ...[...s.prompts.entries()].map(([round, marker]) => {
        const btn = document.createElement("button");
        btn.textContent = `undo round ${round}`;
        btn.setAttribute("aria-label", markerLabel(marker, round));
        btn.addEventListener("click", () => void controller.undo(round));
        return btn;
      }),
    );
  };

  const controller = new Controller(api, render);

  upload.addEventListener("change", () => {
    const file = upload.files?.[0];
    if (!file) return;
    targetImg.src = URL.createObjectURL(file);
    targetImg.onload = () => {
      controller.targetFrame = frameFor(targetCanvas, targetImg);
    };
    void controller.upload(file);
  });

  uploadRef.addEventListener("change", () => {
    const file = uploadRef.files?.[0];
    if (!file) return;
    referenceImg.src = URL.createObjectURL(file);
    referenceImg.onload = () => {
      controller.referenceFrame = frameFor(referenceCanvas, referenceImg);
    };
    void controller.uploadReference(file);
  });

  polarityToggle.addEventListener("change", () => {
    controller.setPolarity(polarityToggle.checked ? "negative" : "positive");
  });

  slider.addEventListener("input", () => {
    controller.slideThreshold(Number(slider.value));
  });

  wirePane(targetCanvas, "target", controller, () => controller.state.polarity);
  wirePane(referenceCanvas, "reference", controller, () => controller.state.polarity);

  return controller;
}

if (typeof document !== "undefined" && document.getElementById("target-canvas")) {
  boot();
}
