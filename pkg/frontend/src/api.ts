// Thin typed client over the service JSON API. The SSE subscription is
// implemented on fetch streaming rather than EventSource so the same code
// runs in the browser and under node-based tests.

import {
  ApiError,
  MetricsSnapshot,
  ModelsListing,
  PredictionRecord,
  QueuePage,
  StreamEvent,
} from "./types.js";

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const resp = await fetch(url, {
    headers: { "Content-Type": "application/json" },
    ...init,
  });
  let body: unknown = null;
  const text = await resp.text();
  if (text) {
    try {
      body = JSON.parse(text);
    } catch {
      body = text;
    }
  }
  if (!resp.ok) {
    const detail =
      body && typeof body === "object" && "detail" in (body as Record<string, unknown>)
        ? (body as Record<string, unknown>).detail
        : body;
    throw new ApiError(resp.status, detail);
  }
  return body as T;
}

export class ApiClient {
  constructor(private baseUrl: string = "") {}

  queue(limit = 100, cursor?: string): Promise<QueuePage> {
    const params = new URLSearchParams({ limit: String(limit) });
    if (cursor) params.set("cursor", cursor);
    return request<QueuePage>(`${this.baseUrl}/v1/review/queue?${params}`);
  }

  async fullQueue(): Promise<PredictionRecord[]> {
    const items: PredictionRecord[] = [];
    let cursor: string | undefined;
    for (;;) {
      const page = await this.queue(100, cursor);
      items.push(...page.items);
      if (!page.next_cursor) return items;
      cursor = page.next_cursor;
    }
  }

  confirm(predictionId: string, operatorId: string): Promise<PredictionRecord> {
    return request<PredictionRecord>(
      `${this.baseUrl}/v1/review/${encodeURIComponent(predictionId)}/confirm`,
      { method: "POST", body: JSON.stringify({ operator_id: operatorId }) },
    );
  }

  correct(
    predictionId: string,
    operatorId: string,
    corrections: Record<string, string>,
  ): Promise<PredictionRecord & { training_job: string | null }> {
    return request(`${this.baseUrl}/v1/review/${encodeURIComponent(predictionId)}/correct`, {
      method: "POST",
      body: JSON.stringify({ operator_id: operatorId, corrections }),
    });
  }

  metrics(): Promise<MetricsSnapshot> {
    return request<MetricsSnapshot>(`${this.baseUrl}/v1/metrics`);
  }

  models(): Promise<ModelsListing> {
    return request<ModelsListing>(`${this.baseUrl}/v1/models`);
  }

  rollback(): Promise<{ current: number; previous: number }> {
    return request(`${this.baseUrl}/v1/models/rollback`, { method: "POST" });
  }

  imageUrl(digest: string): string {
    return `${this.baseUrl}/v1/images/${encodeURIComponent(digest)}`;
  }

  /**
   * Subscribe to the review event stream. Returns an abort function.
   * Events are delivered in order; onDown fires when the connection drops
   * so the UI can show a reconnect state (callers decide retry policy).
   */
  subscribe(
    onEvent: (event: StreamEvent) => void,
    onDown?: (reason: string) => void,
  ): () => void {
    const controller = new AbortController();
    const run = async () => {
      try {
        const resp = await fetch(`${this.baseUrl}/v1/review/stream`, {
          signal: controller.signal,
          headers: { Accept: "text/event-stream" },
        });
        if (!resp.ok || !resp.body) {
          onDown?.(`stream refused: ${resp.status}`);
          return;
        }
        const reader = resp.body.getReader();
        const decoder = new TextDecoder();
        let buffer = "";
        for (;;) {
          const { done, value } = await reader.read();
          if (done) break;
          buffer += decoder.decode(value, { stream: true });
          let idx: number;
          while ((idx = buffer.indexOf("\n\n")) >= 0) {
            const chunk = buffer.slice(0, idx);
            buffer = buffer.slice(idx + 2);
            for (const line of chunk.split("\n")) {
              if (line.startsWith("data: ")) {
                onEvent(JSON.parse(line.slice(6)) as StreamEvent);
              }
            }
          }
        }
        onDown?.("stream ended");
      } catch (err) {
        if (!controller.signal.aborted) {
          onDown?.(String(err));
        }
      }
    };
    void run();
    return () => controller.abort();
  }
}
