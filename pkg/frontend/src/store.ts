// Console state and the resolution workflow, kept free of DOM concerns so
// the whole review flow is unit-testable. Items stay in FIFO arrival order;
// resolutions remove optimistically and restore (with the server's reason)
// when the service refuses them.

import { ApiClient } from "./api.js";
import {
  ApiError,
  MetricsSnapshot,
  ModelsListing,
  PredictionRecord,
  StreamEvent,
} from "./types.js";

export type ConnectionState = "connecting" | "live" | "reconnecting";

export interface Toast {
  kind: "info" | "error";
  message: string;
}

export interface StoreListener {
  (): void;
}

export class ReviewStore {
  items: PredictionRecord[] = [];
  selected = 0;
  connection: ConnectionState = "connecting";
  toasts: Toast[] = [];
  metrics: MetricsSnapshot | null = null;
  models: ModelsListing | null = null;
  operatorId = "console-operator";

  private listeners: StoreListener[] = [];
  private stopStream: (() => void) | null = null;

  constructor(private api: ApiClient) {}

  onChange(listener: StoreListener): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  private toast(kind: Toast["kind"], message: string): void {
    this.toasts.push({ kind, message });
    if (this.toasts.length > 5) this.toasts.shift();
    this.emit();
  }

  async loadQueue(): Promise<void> {
    const items = await this.api.fullQueue();
    // server pages are FIFO already; keep seq order defensively
    this.items = [...items].sort((a, b) => a.seq - b.seq);
    this.clampSelection();
    this.emit();
  }

  async refreshStatus(): Promise<void> {
    const [metrics, models] = await Promise.all([this.api.metrics(), this.api.models()]);
    this.metrics = metrics;
    this.models = models;
    this.emit();
  }

  start(): void {
    this.stopStream = this.api.subscribe(
      (event) => this.applyEvent(event),
      () => {
        this.connection = "reconnecting";
        this.emit();
      },
    );
    this.connection = "live";
    this.emit();
  }

  stop(): void {
    this.stopStream?.();
    this.stopStream = null;
  }

  applyEvent(event: StreamEvent): void {
    switch (event.type) {
      case "queue_add":
        if (!this.items.some((item) => item.id === event.item.id)) {
          this.items.push(event.item);
        }
        break;
      case "resolved":
        this.removeItem(event.prediction_id);
        break;
      case "model_swap":
        if (this.models) {
          void this.refreshStatus();
        }
        break;
      case "job_finished":
        void this.refreshStatus();
        break;
    }
    this.clampSelection();
    this.emit();
  }

  private removeItem(id: string): PredictionRecord | null {
    const idx = this.items.findIndex((item) => item.id === id);
    if (idx < 0) return null;
    const [removed] = this.items.splice(idx, 1);
    this.clampSelection();
    return removed;
  }

  private restoreItem(item: PredictionRecord): void {
    // back into arrival order, not at the end of the queue
    const at = this.items.findIndex((other) => other.seq > item.seq);
    if (at < 0) this.items.push(item);
    else this.items.splice(at, 0, item);
    this.clampSelection();
  }

  private clampSelection(): void {
    if (this.selected >= this.items.length) this.selected = Math.max(0, this.items.length - 1);
  }

  select(delta: number): void {
    if (!this.items.length) return;
    this.selected = Math.min(this.items.length - 1, Math.max(0, this.selected + delta));
    this.emit();
  }

  selectedItem(): PredictionRecord | null {
    return this.items[this.selected] ?? null;
  }

  /** Optimistic confirm: the item leaves the list immediately and comes
   *  back only if the service refuses the resolution. */
  async confirm(id: string): Promise<boolean> {
    const item = this.removeItem(id);
    if (!item) return false;
    this.emit();
    try {
      await this.api.confirm(id, this.operatorId);
      return true;
    } catch (err) {
      this.handleResolutionError(item, err);
      return false;
    }
  }

  /** Optimistic correct; on 4xx the item is restored and the server's
   *  rejection reason surfaces as a toast. */
  async correct(id: string, corrections: Record<string, string>): Promise<boolean> {
    const item = this.removeItem(id);
    if (!item) return false;
    this.emit();
    try {
      const resp = await this.api.correct(id, this.operatorId, corrections);
      if (resp.training_job) {
        this.toast("info", `training started: ${resp.training_job}`);
      }
      void this.refreshStatus();
      return true;
    } catch (err) {
      this.handleResolutionError(item, err);
      return false;
    }
  }

  lastRejection: { id: string; reason: string } | null = null;

  private handleResolutionError(item: PredictionRecord, err: unknown): void {
    if (err instanceof ApiError) {
      if (err.status === 409) {
        // someone else already resolved it; stay removed
        this.toast("info", `${item.id} was already resolved elsewhere`);
        return;
      }
      this.restoreItem(item);
      const reason = extractReason(err);
      this.lastRejection = { id: item.id, reason };
      this.toast("error", `${item.id} rejected: ${reason}`);
      return;
    }
    this.restoreItem(item);
    this.lastRejection = { id: item.id, reason: String(err) };
    this.toast("error", `request failed: ${String(err)}`);
  }
}

export function extractReason(err: ApiError): string {
  const detail = err.detail;
  if (detail && typeof detail === "object" && "rejected" in (detail as Record<string, unknown>)) {
    const rejected = (detail as { rejected: Record<string, string> }).rejected;
    return Object.entries(rejected)
      .map(([task, reason]) => `${task}: ${reason}`)
      .join(", ");
  }
  return typeof detail === "string" ? detail : JSON.stringify(detail);
}

export function routingBadge(band: string): string {
  switch (band) {
    case "auto_accept":
      return "green";
    case "human_review":
      return "amber";
    default:
      return "red";
  }
}
