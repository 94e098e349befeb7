/** Shared types mirroring the counting service's JSON API. */

export type Polarity = "positive" | "negative";

export type PromptType = "box" | "point";

export interface PromptPayload {
  type: PromptType;
  /** [x0, y0, x1, y1] for boxes, [x, y] for points; normalized to [0,1]. */
  coords: number[];
  polarity: Polarity;
  reference_image_id?: string;
}

export interface Detection {
  box: [number, number, number, number];
  score: number;
}

export interface RoundResult {
  round: number;
  count: number;
  threshold: number;
  detections: Detection[];
}

export interface SessionInfo {
  session_id: string;
  width: number;
  height: number;
}

export interface ReferenceInfo {
  reference_image_id: string;
  width: number;
  height: number;
}

/** Stable machine-readable error codes emitted by the service. */
export type ErrorCode =
  | "unsupported_media"
  | "too_large"
  | "unknown_session"
  | "no_positive_prompt"
  | "geometry_out_of_bounds"
  | "unknown_reference"
  | "unknown_round"
  | "would_leave_no_positive"
  | "no_rounds_yet"
  | "invalid_threshold";

export class ApiError extends Error {
  constructor(
    public readonly code: ErrorCode | string,
    message: string,
    public readonly status: number,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

/** Human-readable inline messages for the correction flow. */
export function describeError(err: ApiError): string {
  switch (err.code) {
    case "no_positive_prompt":
      return "Add a positive prompt first.";
    case "would_leave_no_positive":
      return "Cannot remove the last positive prompt while negatives remain.";
    case "geometry_out_of_bounds":
      return "Prompt is outside the image.";
    case "no_rounds_yet":
      return "Draw a prompt before adjusting the threshold.";
    default:
      return err.message || String(err.code);
  }
}
