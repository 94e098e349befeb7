/** Detection overlay rendering.
 *
 * Pure drawing against a minimal 2D-context interface so the renderer can
 * be exercised headlessly. Redrawing never issues a network call: it only
 * consumes an already-received round result.
 */

import { normalizedToCanvas, type DisplayFrame } from "./coords.js";
import type { Polarity, RoundResult } from "./types.js";

/** The subset of CanvasRenderingContext2D the overlay needs. */
export interface DrawContext {
  strokeStyle: string | CanvasGradient | CanvasPattern;
  fillStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  font: string;
  clearRect(x: number, y: number, w: number, h: number): void;
  strokeRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  stroke(): void;
  fill(): void;
  fillText(text: string, x: number, y: number): void;
}

export const DETECTION_COLOR = "#ffd83d";
export const POSITIVE_COLOR = "#3dd964";
export const NEGATIVE_COLOR = "#ff5c5c";

export interface PromptMarker {
  /** Normalized geometry: [x,y] point or [x0,y0,x1,y1] box. */
  coords: number[];
  polarity: Polarity;
}

/** Accessibility label for a prompt marker; positive and negative must be
 * distinguishable by label, not only by color. */
export function markerLabel(m: PromptMarker, round: number): string {
  const kind = m.coords.length === 2 ? "point" : "box";
  return `${m.polarity} ${kind} prompt (round ${round})`;
}

export function renderOverlay(
  ctx: DrawContext,
  frame: DisplayFrame,
  result: RoundResult | null,
  prompts: PromptMarker[],
): void {
  ctx.clearRect(0, 0, frame.canvasW, frame.canvasH);

  const detections = result?.detections ?? [];
  ctx.lineWidth = 2;
  ctx.strokeStyle = DETECTION_COLOR;
  for (const det of detections) {
    const [x0, y0, x1, y1] = det.box;
    const a = normalizedToCanvas(frame, x0, y0);
    const b = normalizedToCanvas(frame, x1, y1);
    ctx.strokeRect(a.px, a.py, b.px - a.px, b.py - a.py);
  }

  for (const marker of prompts) {
    ctx.strokeStyle =
      marker.polarity === "positive" ? POSITIVE_COLOR : NEGATIVE_COLOR;
    if (marker.coords.length === 2) {
      const [x, y] = marker.coords;
      const p = normalizedToCanvas(frame, x, y);
      ctx.beginPath();
      if (marker.polarity === "positive") {
        // plus sign
        ctx.moveTo(p.px - 6, p.py);
        ctx.lineTo(p.px + 6, p.py);
        ctx.moveTo(p.px, p.py - 6);
        ctx.lineTo(p.px, p.py + 6);
      } else {
        // minus sign
        ctx.moveTo(p.px - 6, p.py);
        ctx.lineTo(p.px + 6, p.py);
      }
      ctx.stroke();
    } else {
      const [x0, y0, x1, y1] = marker.coords;
      const a = normalizedToCanvas(frame, x0, y0);
      const b = normalizedToCanvas(frame, x1, y1);
      ctx.strokeRect(a.px, a.py, b.px - a.px, b.py - a.py);
    }
  }

  ctx.fillStyle = DETECTION_COLOR;
  ctx.font = "24px sans-serif";
  const count = result?.count ?? 0;
  const round = result?.round ?? 0;
  ctx.fillText(`count: ${count}`, 8, 28);
  if (round > 0) {
    ctx.fillText(`round: ${round}`, 8, 56);
  }
}
