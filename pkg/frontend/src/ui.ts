// DOM rendering for the two screens. Every number shown here is a field
// from a service response; formatting is the only client-side math.

import { ApiClient } from "./api.js";
import { ReviewStore, routingBadge } from "./store.js";
import { PredictionRecord } from "./types.js";

function el(tag: string, className?: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function pct(value: number | null | undefined, digits = 1): string {
  return value == null ? "–" : `${(value * 100).toFixed(digits)}%`;
}

function num(value: number | null | undefined, digits = 3): string {
  return value == null ? "–" : value.toFixed(digits);
}

function age(createdAt: number): string {
  const seconds = Math.max(0, Date.now() / 1000 - createdAt);
  if (seconds < 90) return `${Math.round(seconds)}s`;
  if (seconds < 5400) return `${Math.round(seconds / 60)}m`;
  return `${Math.round(seconds / 3600)}h`;
}

export class ConsoleUi {
  private root: HTMLElement;
  private screen: "review" | "status" = "review";

  constructor(
    root: HTMLElement,
    private store: ReviewStore,
    private api: ApiClient,
  ) {
    this.root = root;
    store.onChange(() => this.render());
    document.addEventListener("keydown", (event) => this.onKey(event));
  }

  private onKey(event: KeyboardEvent): void {
    if (event.target instanceof HTMLInputElement) return;
    switch (event.key) {
      case "j":
      case "ArrowDown":
        this.store.select(1);
        break;
      case "k":
      case "ArrowUp":
        this.store.select(-1);
        break;
      case "c": {
        const item = this.store.selectedItem();
        if (item) void this.store.confirm(item.id);
        break;
      }
      case "x": {
        const item = this.store.selectedItem();
        if (item) this.openCorrectionForm(item.id);
        break;
      }
      case "1":
        this.showScreen("review");
        break;
      case "2":
        this.showScreen("status");
        break;
    }
  }

  showScreen(screen: "review" | "status"): void {
    this.screen = screen;
    if (screen === "status") void this.store.refreshStatus();
    this.render();
  }

  private correctionFormFor: string | null = null;

  openCorrectionForm(id: string): void {
    this.correctionFormFor = id;
    this.render();
  }

  render(): void {
    this.root.replaceChildren();
    this.root.appendChild(this.renderHeader());
    this.root.appendChild(
      this.screen === "review" ? this.renderReview() : this.renderStatus(),
    );
    this.root.appendChild(this.renderToasts());
  }

  private renderHeader(): HTMLElement {
    const header = el("header", "topbar");
    const title = el("h1", undefined, "review console");
    const nav = el("nav");
    for (const [label, screen] of [
      ["queue [1]", "review"],
      ["status [2]", "status"],
    ] as const) {
      const button = el("button", this.screen === screen ? "tab active" : "tab", label);
      button.addEventListener("click", () => this.showScreen(screen));
      nav.appendChild(button);
    }
    const conn = el("span", `conn ${this.store.connection}`, this.store.connection);
    const version = el(
      "span",
      "chip",
      `model v${this.store.models?.current ?? this.store.metrics?.model_version ?? "…"}`,
    );
    header.append(title, nav, version, conn);
    return header;
  }

  private renderReview(): HTMLElement {
    const section = el("section", "review");
    if (!this.store.items.length) {
      section.appendChild(el("p", "empty", "queue is empty — nothing pending review"));
      return section;
    }
    const list = el("ul", "queue");
    this.store.items.forEach((item, index) => {
      list.appendChild(this.renderItem(item, index === this.store.selected));
    });
    section.appendChild(list);
    section.appendChild(
      el("p", "hint", "j/k move · c confirm · x correct · enter submits the form"),
    );
    return section;
  }

  private renderItem(item: PredictionRecord, selected: boolean): HTMLElement {
    const li = el("li", selected ? "item selected" : "item");
    li.dataset.id = item.id;

    const img = el("img", "thumb") as HTMLImageElement;
    img.src = this.api.imageUrl(item.image.digest);
    img.alt = item.image.id;
    img.onerror = () => {
      img.replaceWith(el("div", "thumb placeholder", "no image"));
    };
    li.appendChild(img);

    const body = el("div", "item-body");
    const plate = item.answers["plate_recognition"];
    const breakdown = item.confidence["plate_recognition"];
    const headline = el("div", "headline");
    headline.appendChild(el("span", "plate", plate?.value || "(no value)"));
    headline.appendChild(
      el("span", `badge ${routingBadge(item.routing)}`, item.routing.replace("_", " ")),
    );
    if (breakdown) {
      headline.appendChild(el("span", "conf", num(breakdown.combined)));
    }
    body.appendChild(headline);

    const detail = el("div", "detail");
    for (const [task, answer] of Object.entries(item.answers)) {
      if (task === "plate_recognition") continue;
      detail.appendChild(el("span", "answer", `${task}: ${answer.value || "–"}`));
    }
    if (breakdown) {
      detail.appendChild(
        el(
          "span",
          "factors",
          `gen ${num(breakdown.generation_prob)} · penalty ${num(
            breakdown.uncertainty_penalty,
            2,
          )} · format ${num(breakdown.format_validity, 2)}`,
        ),
      );
    }
    detail.appendChild(el("span", "meta", `v${item.model_version} · ${age(item.created_at)} old`));
    body.appendChild(detail);

    const actions = el("div", "actions");
    const confirmBtn = el("button", "confirm", "confirm");
    confirmBtn.addEventListener("click", () => void this.store.confirm(item.id));
    const correctBtn = el("button", "correct", "correct…");
    correctBtn.addEventListener("click", () => this.openCorrectionForm(item.id));
    actions.append(confirmBtn, correctBtn);
    body.appendChild(actions);

    if (this.correctionFormFor === item.id) {
      body.appendChild(this.renderCorrectionForm(item));
    }
    li.appendChild(body);
    return li;
  }

  private renderCorrectionForm(item: PredictionRecord): HTMLElement {
    const form = el("form", "correction-form") as HTMLFormElement;
    const fields: Record<string, HTMLInputElement> = {};
    for (const task of ["plate_recognition", "state_classification"]) {
      const answer = item.answers[task];
      if (!answer) continue;
      const label = el("label", undefined, task.replace("_", " "));
      const input = el("input") as HTMLInputElement;
      input.name = task;
      input.value = answer.value;
      label.appendChild(input);
      form.appendChild(label);
      fields[task] = input;
    }
    const submit = el("button", "submit", "submit correction");
    form.appendChild(submit);
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      const corrections: Record<string, string> = {};
      for (const [task, input] of Object.entries(fields)) {
        if (input.value.trim() && input.value.trim() !== item.answers[task]?.value) {
          corrections[task] = input.value.trim();
        }
      }
      this.correctionFormFor = null;
      void this.store.correct(item.id, corrections);
    });
    return form;
  }

  private renderStatus(): HTMLElement {
    const section = el("section", "status");
    const metrics = this.store.metrics;
    const models = this.store.models;
    if (!metrics) {
      section.appendChild(el("p", "empty", "loading status…"));
      return section;
    }

    const trigger = metrics.trigger;
    const progress = el("div", "card");
    progress.appendChild(el("h2", undefined, "corrections until forced training"));
    const bar = el("div", "bar");
    const fill = el("div", "fill");
    fill.style.width = `${Math.min(
      100,
      (metrics.pending_corrections / trigger.max_corrections) * 100,
    )}%`;
    bar.appendChild(fill);
    progress.appendChild(bar);
    progress.appendChild(
      el("p", "big", `${metrics.pending_corrections}/${trigger.max_corrections}`),
    );
    section.appendChild(progress);

    const accuracy = el("div", "card");
    accuracy.appendChild(el("h2", undefined, "accuracy"));
    accuracy.appendChild(el("p", undefined, `rolling: ${pct(metrics.rolling_accuracy)}`));
    accuracy.appendChild(el("p", undefined, `baseline: ${pct(metrics.baseline_accuracy)}`));
    if (metrics.labeled.count) {
      accuracy.appendChild(
        el(
          "p",
          undefined,
          `labeled traffic: acc ${pct(metrics.labeled.plate_accuracy)} · cer ${num(
            metrics.labeled.cer ?? null,
          )} · ece ${num(metrics.labeled.ece ?? null)}`,
        ),
      );
    }
    section.appendChild(accuracy);

    const lineage = el("div", "card");
    lineage.appendChild(el("h2", undefined, "model lineage"));
    if (models) {
      const list = el("ul", "versions");
      for (const version of [...models.versions].sort((a, b) => b.version - a.version)) {
        const row = el("li", `version ${version.state}`);
        row.appendChild(el("span", "chip", `v${version.version}`));
        row.appendChild(el("span", "state", version.state));
        const gate = version.gate_report;
        if (gate) {
          const label =
            gate.decision === "deploy"
              ? `deployed: p=${num(gate.p_value)} drop=${pct(gate.forgetting_drop)}`
              : gate.reject_cause === "forgetting"
                ? `blocked: forgetting ${pct(gate.forgetting_drop)} > ${pct(gate.forgetting_limit, 0)}`
                : `blocked: not significant (p=${num(gate.p_value)})`;
          row.appendChild(el("span", `gate ${gate.decision}`, label));
        }
        list.appendChild(row);
      }
      lineage.appendChild(list);
    }
    const rollbackBtn = el("button", "rollback", "roll back to previous version");
    rollbackBtn.addEventListener("click", () => void this.rollback());
    lineage.appendChild(rollbackBtn);
    section.appendChild(lineage);

    if (metrics.latency) {
      const latency = el("div", "card");
      latency.appendChild(el("h2", undefined, "latency"));
      const p = metrics.latency.percentiles;
      latency.appendChild(
        el(
          "p",
          undefined,
          `p50 ${p.p50}ms · p90 ${p.p90}ms · p95 ${p.p95}ms · p99 ${p.p99}ms`,
        ),
      );
      section.appendChild(latency);
    }
    return section;
  }

  private async rollback(): Promise<void> {
    if (!window.confirm("Roll back to the previous model version?")) return;
    try {
      const result = await this.api.rollback();
      this.store.toasts.push({
        kind: "info",
        message: `rolled back: v${result.current} active, v${result.previous} standby`,
      });
      await this.store.refreshStatus();
    } catch (err) {
      this.store.toasts.push({ kind: "error", message: String(err) });
      this.render();
    }
  }

  private renderToasts(): HTMLElement {
    const holder = el("div", "toasts");
    for (const toast of this.store.toasts.slice(-3)) {
      holder.appendChild(el("div", `toast ${toast.kind}`, toast.message));
    }
    return holder;
  }
}
