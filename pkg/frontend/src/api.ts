/** Thin typed client over the counting service's JSON API.
 *
 * `fetch` is injectable so tests can run without a browser or server.
 */

import {
  ApiError,
  type PromptPayload,
  type ReferenceInfo,
  type RoundResult,
  type SessionInfo,
} from "./types.js";

export type FetchLike = (
  url: string,
  init?: RequestInit,
) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (...a) => fetch(...a),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    if (resp.status === 204) {
      return undefined as T;
    }
    const body = await resp.json();
    if (!resp.ok) {
      throw new ApiError(
        body?.code ?? "unknown_error",
        body?.message ?? resp.statusText,
        resp.status,
      );
    }
    return body as T;
  }

  createSession(image: Blob, filename = "image.png"): Promise<SessionInfo> {
    const form = new FormData();
    form.append("image", image, filename);
    return this.request("/sessions", { method: "POST", body: form });
  }

  uploadReference(
    sessionId: string,
    image: Blob,
    filename = "reference.png",
  ): Promise<ReferenceInfo> {
    const form = new FormData();
    form.append("image", image, filename);
    return this.request(`/sessions/${sessionId}/reference`, {
      method: "POST",
      body: form,
    });
  }

  addPrompt(sessionId: string, prompt: PromptPayload): Promise<RoundResult> {
    return this.request(`/sessions/${sessionId}/prompts`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(prompt),
    });
  }

  removePrompt(sessionId: string, round: number): Promise<RoundResult> {
    return this.request(`/sessions/${sessionId}/prompts/${round}`, {
      method: "DELETE",
    });
  }

  setThreshold(sessionId: string, threshold: number): Promise<RoundResult> {
    return this.request(`/sessions/${sessionId}/threshold`, {
      method: "PUT",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ threshold }),
    });
  }

  deleteSession(sessionId: string): Promise<void> {
    return this.request(`/sessions/${sessionId}`, { method: "DELETE" });
  }
}
