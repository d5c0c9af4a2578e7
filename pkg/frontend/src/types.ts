// JSON shapes of the service API. Field names mirror the wire format
// exactly; the console never recomputes a number the server already sent.

export interface ImageRef {
  id: string;
  digest: string;
  width: number;
  height: number;
  quality_score: number;
}

export interface ParsedAnswer {
  task: string;
  value: string;
  hedge_terms: string[];
  format_validity: number;
  raw_text: string;
}

export interface ConfidenceBreakdown {
  generation_prob: number;
  uncertainty_penalty: number;
  format_validity: number;
  combined: number;
}

export type RoutingBand = "auto_accept" | "human_review" | "auto_reject";

export interface PredictionRecord {
  id: string;
  seq: number;
  image: ImageRef;
  answers: Record<string, ParsedAnswer>;
  confidence: Record<string, ConfidenceBreakdown>;
  routing: RoutingBand;
  model_version: number;
  latency: Record<string, number>;
  created_at: number;
  failures: Record<string, string>;
  resolution: Record<string, unknown> | null;
}

export interface QueuePage {
  items: PredictionRecord[];
  next_cursor: string | null;
  pending_total: number;
}

export interface MetricsSnapshot {
  total_predictions: number;
  routing_counts: Record<RoutingBand, number>;
  routing_fractions: Record<RoutingBand, number>;
  pending_review: number;
  pending_corrections: number;
  secondary_review: number;
  rolling_accuracy: number | null;
  baseline_accuracy: number | null;
  labeled: { count: number; cer?: number; plate_accuracy?: number; ece?: number };
  latency: { percentiles: Record<string, number> } | null;
  model_version: number | null;
  trigger: {
    min_corrections: number;
    max_corrections: number;
    time_threshold_hours: number;
    accuracy_drop_threshold: number;
  };
  training_rounds: number;
}

export interface GateReportView {
  n: number;
  mean_delta: number;
  t_statistic: number | null;
  p_value: number;
  forgetting_drop: number;
  decision: "deploy" | "reject";
  reject_cause: "not_significant" | "forgetting" | null;
  alpha: number;
  forgetting_limit: number;
}

export interface ModelVersionView {
  version: number;
  path: string;
  created_at: number;
  state: "staged" | "active" | "previous" | "archived";
  gate_report: GateReportView | null;
}

export interface ModelsListing {
  current: number | null;
  previous: number | null;
  versions: ModelVersionView[];
}

export type StreamEvent =
  | { type: "queue_add"; item: PredictionRecord }
  | { type: "resolved"; prediction_id: string; action: string; pending_corrections?: number }
  | { type: "model_swap"; version: number }
  | { type: "job_finished"; job: Record<string, unknown> };

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: unknown,
  ) {
    super(`HTTP ${status}: ${JSON.stringify(detail)}`);
  }
}
