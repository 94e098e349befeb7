/** Letterboxed display-frame arithmetic.
 *
 * The image is drawn aspect-preserving and centered inside the canvas;
 * gestures arrive in canvas pixels and must be normalized against the
 * displayed image content, inverting the letterbox exactly.
 */

import type { Polarity, PromptPayload } from "./types.js";

export interface DisplayFrame {
  canvasW: number;
  canvasH: number;
  imageW: number;
  imageH: number;
}

/** Drags with a diagonal below this many pixels collapse to point gestures. */
export const POINT_COLLAPSE_PX = 4;

export function scale(f: DisplayFrame): number {
  return Math.min(f.canvasW / f.imageW, f.canvasH / f.imageH);
}

export function contentOffset(f: DisplayFrame): { x: number; y: number } {
  const s = scale(f);
  return {
    x: (f.canvasW - f.imageW * s) / 2,
    y: (f.canvasH - f.imageH * s) / 2,
  };
}

/** Canvas pixel -> normalized image coordinate in [0,1]. */
export function canvasToNormalized(
  f: DisplayFrame,
  px: number,
  py: number,
): { x: number; y: number } {
  const s = scale(f);
  const off = contentOffset(f);
  return {
    x: clamp01((px - off.x) / (f.imageW * s)),
    y: clamp01((py - off.y) / (f.imageH * s)),
  };
}

/** Normalized image coordinate -> canvas pixel. */
export function normalizedToCanvas(
  f: DisplayFrame,
  x: number,
  y: number,
): { px: number; py: number } {
  const s = scale(f);
  const off = contentOffset(f);
  return { px: off.x + x * f.imageW * s, py: off.y + y * f.imageH * s };
}

function clamp01(v: number): number {
  return Math.min(1, Math.max(0, v));
}

export interface Gesture {
  /** Canvas-pixel coordinates of the pointer-down and pointer-up events. */
  downX: number;
  downY: number;
  upX: number;
  upY: number;
  polarity: Polarity;
  pane: "target" | "reference";
}

/** Convert a raw pointer gesture into a prompt payload.
 *
 * A drag shorter than POINT_COLLAPSE_PX diagonal becomes a point at the
 * pointer-down position; otherwise the drag corners become a box with
 * sorted edges.
 */
export function gestureToPrompt(
  f: DisplayFrame,
  g: Gesture,
  referenceImageId?: string,
): PromptPayload {
  const diag = Math.hypot(g.upX - g.downX, g.upY - g.downY);
  const base: Pick<PromptPayload, "polarity" | "reference_image_id"> = {
    polarity: g.polarity,
    ...(g.pane === "reference" && referenceImageId
      ? { reference_image_id: referenceImageId }
      : {}),
  };
  if (diag < POINT_COLLAPSE_PX) {
    const p = canvasToNormalized(f, g.downX, g.downY);
    return { type: "point", coords: [p.x, p.y], ...base };
  }
  const a = canvasToNormalized(f, g.downX, g.downY);
  const b = canvasToNormalized(f, g.upX, g.upY);
  return {
    type: "box",
    coords: [
      Math.min(a.x, b.x),
      Math.min(a.y, b.y),
      Math.max(a.x, b.x),
      Math.max(a.y, b.y),
    ],
    ...base,
  };
}
