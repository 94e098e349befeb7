/** UI controller: session state, gesture queueing, threshold debounce.
 *
 * The displayed count is single-source-of-truth: it is only ever set from a
 * service round result, never computed client-side. One prompt request is
 * in flight at a time; gestures made meanwhile are queued in order.
 */

import type { ApiClient } from "./api.js";
import { gestureToPrompt, type DisplayFrame, type Gesture } from "./coords.js";
import type { PromptMarker } from "./overlay.js";
import { ApiError, describeError, type Polarity, type RoundResult } from "./types.js";

/** Debounce interval keeping threshold updates at or under 5 requests/s. */
export const THRESHOLD_DEBOUNCE_MS = 200;

export interface ViewState {
  sessionId: string | null;
  referenceImageId: string | null;
  /** Latest service-reported result; null before round 1. */
  result: RoundResult | null;
  /** Prompt markers by round number, for overlay + undo. */
  prompts: Map<number, PromptMarker>;
  polarity: Polarity;
  threshold: number;
  inlineError: string | null;
  crossImageMode: boolean;
}

type Scheduler = {
  setTimeout(fn: () => void, ms: number): unknown;
  clearTimeout(id: unknown): void;
};

export class Controller {
  readonly state: ViewState = {
    sessionId: null,
    referenceImageId: null,
    result: null,
    prompts: new Map(),
    polarity: "positive",
    threshold: 0.3,
    inlineError: null,
    crossImageMode: false,
  };

  private queue: Gesture[] = [];
  private inFlight = false;
  private pendingThreshold: number | null = null;
  private thresholdTimer: unknown = null;

  constructor(
    private readonly api: ApiClient,
    private readonly onChange: (s: ViewState) => void = () => {},
    private readonly scheduler: Scheduler = globalThis,
  ) {}

  /** Frames are owned by the view layer and swapped on resize. */
  targetFrame: DisplayFrame = { canvasW: 1, canvasH: 1, imageW: 1, imageH: 1 };
  referenceFrame: DisplayFrame = { canvasW: 1, canvasH: 1, imageW: 1, imageH: 1 };

  private emit(): void {
    this.onChange(this.state);
  }

  private fail(err: unknown): void {
    this.state.inlineError =
      err instanceof ApiError ? describeError(err) : String(err);
    this.emit();
  }

  async upload(image: Blob): Promise<void> {
    const info = await this.api.createSession(image);
    this.state.sessionId = info.session_id;
    this.state.result = null;
    this.state.prompts.clear();
    this.state.referenceImageId = null;
    this.state.inlineError = null;
    this.emit();
  }

  async uploadReference(image: Blob): Promise<void> {
    if (!this.state.sessionId) return;
    const info = await this.api.uploadReference(this.state.sessionId, image);
    this.state.referenceImageId = info.reference_image_id;
    this.state.crossImageMode = true;
    this.state.inlineError = null;
    this.emit();
  }

  setPolarity(p: Polarity): void {
    this.state.polarity = p;
    this.emit();
  }

  /** Entry point for pointer gestures; queues if a request is in flight. */
  gesture(g: Gesture): void {
    if (!this.state.sessionId) return;
    this.queue.push(g);
    void this.drain();
  }

  private async drain(): Promise<void> {
    if (this.inFlight) return;
    const g = this.queue.shift();
    if (!g) return;
    this.inFlight = true;
    try {
      const frame = g.pane === "reference" ? this.referenceFrame : this.targetFrame;
      const prompt = gestureToPrompt(
        frame,
        g,
        this.state.referenceImageId ?? undefined,
      );
      const result = await this.api.addPrompt(this.state.sessionId!, prompt);
      this.state.result = result;
      this.state.threshold = result.threshold;
      this.state.prompts.set(result.round, {
        coords: prompt.coords,
        polarity: prompt.polarity,
      });
      this.state.inlineError = null;
      this.emit();
    } catch (err) {
      this.fail(err);
    } finally {
      this.inFlight = false;
      if (this.queue.length > 0) void this.drain();
    }
  }

  /** Undo for round k issues DELETE for exactly round k. */
  async undo(round: number): Promise<void> {
    if (!this.state.sessionId) return;
    try {
      const result = await this.api.removePrompt(this.state.sessionId, round);
      this.state.prompts.delete(round);
      this.state.result = result.round === 0 && result.count === 0 ? null : result;
      this.state.inlineError = null;
      this.emit();
    } catch (err) {
      this.fail(err);
    }
  }

  /** Debounced threshold updates; only the final settled value is sent when
   * the slider moves faster than the debounce window. */
  slideThreshold(t: number): void {
    this.pendingThreshold = t;
    if (this.thresholdTimer !== null) {
      this.scheduler.clearTimeout(this.thresholdTimer);
    }
    this.thresholdTimer = this.scheduler.setTimeout(() => {
      this.thresholdTimer = null;
      void this.commitThreshold();
    }, THRESHOLD_DEBOUNCE_MS);
  }

  private async commitThreshold(): Promise<void> {
    const t = this.pendingThreshold;
    this.pendingThreshold = null;
    if (t === null || !this.state.sessionId) return;
    try {
      const result = await this.api.setThreshold(this.state.sessionId, t);
      this.state.result = result;
      this.state.threshold = result.threshold;
      this.state.inlineError = null;
      this.emit();
    } catch (err) {
      this.fail(err);
    }
  }

  /** The number shown to the user; always the service's latest count. */
  displayedCount(): number {
    return this.state.result?.count ?? 0;
  }

  thresholdEnabled(): boolean {
    return this.state.result !== null;
  }
}
