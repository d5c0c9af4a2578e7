"""Pipeline runtime: wires dispatch, parsing, routing, corrections, training.

One PipelineRuntime instance owns all durable stores and in-memory indexes
for a service process. The HTTP layer and the closed-loop simulator both
drive this object; the simulator calls it directly for determinism, the
service maps its methods onto endpoints.

Crash recovery is replay-based: predictions, review resolutions, correction
events, and model swaps all land in append-only logs, and startup rebuilds
the review queue, accuracy window, and trigger state from them.
"""

from __future__ import annotations

import json
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from queue import Queue
from typing import Mapping, Optional, Sequence

from . import confidence as conf
from . import metrics as metrics_mod
from .config import ServiceConfig
from .deploy import GateDecision, GateReport, Registry, RejectCause, evaluate_gate
from .hitl import (
    AccuracyWindow,
    CorrectionLog,
    CorrectionRecord,
    CorrectionStatus,
    TriggerState,
    should_train,
)
from .parsing import (
    ParsedAnswer,
    ParseFailure,
    default_lexicon,
    detect_hedging,
    normalize_plate,
    parse,
    resolve_state,
)
from .replay import MockTrainer, ReplayBuffer, ReplayExample, TrainerFailure, run_update
from .stores import JsonlStore, atomic_write_json, read_json
from .vqa import (
    ImageRef,
    LatencyLog,
    MockVlmBackend,
    TaskKind,
    dispatch_all,
    latency_report,
    prompt_for,
)


class UnknownPrediction(Exception):
    pass


class AlreadyResolved(Exception):
    pass


class CorrectionRejected(Exception):
    def __init__(self, reasons: dict[str, str]):
        super().__init__("; ".join(f"{k}: {v}" for k, v in reasons.items()))
        self.reasons = reasons


class BackendUnavailable(Exception):
    pass


class BadCursor(Exception):
    pass


@dataclass
class PredictionRecord:
    id: str
    seq: int
    image: ImageRef
    answers: dict[TaskKind, ParsedAnswer]
    confidence: dict[TaskKind, conf.ConfidenceBreakdown]
    routing: conf.RoutingDecision
    model_version: int
    latency: dict[str, float]
    created_at: float
    failures: dict[str, str] = field(default_factory=dict)
    resolution: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "seq": self.seq,
            "image": self.image.to_dict(),
            "answers": {t.value: a.to_dict() for t, a in self.answers.items()},
            "confidence": {t.value: c.to_dict() for t, c in self.confidence.items()},
            "routing": self.routing.value,
            "model_version": self.model_version,
            "latency": self.latency,
            "created_at": self.created_at,
            "failures": self.failures,
            "resolution": self.resolution,
        }


def _answer_matches(backend: MockVlmBackend, image: ImageRef, task: TaskKind, target: str) -> bool:
    """Evaluate one probe/validation sample: does the backend answer `target`?"""
    resp = backend.answer(image, prompt_for(task))
    if task is TaskKind.PLATE_RECOGNITION:
        try:
            return normalize_plate(resp.text) == target
        except Exception:
            return False
    if task is TaskKind.STATE_CLASSIFICATION:
        return resolve_state(resp.text) == target
    return resp.text.strip() == target


class PipelineRuntime:
    def __init__(self, config: ServiceConfig, train_sync: bool = False):
        self.config = config
        self.train_sync = train_sync
        self.lexicon = default_lexicon()
        data = Path(config.data_dir)
        data.mkdir(parents=True, exist_ok=True)

        self.predictions_store = JsonlStore(data / "predictions.jsonl")
        self.events_store = JsonlStore(data / "events.jsonl")
        self.jobs_store = JsonlStore(data / "jobs.jsonl")
        self.corrections = CorrectionLog(data / "corrections.jsonl")
        self.latency_log = LatencyLog(data / "latency.jsonl")

        self.registry = Registry(config.registry_path)
        self._bootstrap_model()

        self.window = AccuracyWindow(config.window_size)
        self.baseline_accuracy: Optional[float] = None

        self._buffer_path = data / "replay_buffer.jsonl"
        self.replay_buffer = self._load_buffer()
        self._originals = self._load_originals()
        self._probe_path = data / "probe.json"
        self.probe = self._load_or_freeze_probe()

        self._lock = threading.Lock()  # prediction index + queue
        self._job_lock = threading.Lock()
        self._training_active = False
        self._backend_cache: dict[int, MockVlmBackend] = {}
        self._current_version_cache: Optional[int] = None
        self._predictions: dict[str, PredictionRecord] = {}
        self._queue: list[str] = []  # pending review, FIFO prediction ids
        self._pred_seq = 0
        self._job_seq = 0
        self._training_rounds = 0
        self._subscribers: list[Queue] = []
        self.jobs: dict[str, dict] = {}
        self._recover()

    # -- bootstrap / recovery ------------------------------------------------

    def _bootstrap_model(self) -> None:
        if self.registry.current_version() is not None:
            return
        if self.config.initial_script_path is None:
            raise BackendUnavailable(
                "registry has no active model and no initial_script_path is configured"
            )
        script = read_json(self.config.initial_script_path)
        record = self.registry.publish({"script.json": script})
        self.registry.activate(record.version, require_gate=False)

    def _load_buffer(self) -> ReplayBuffer:
        if self._buffer_path.exists():
            return ReplayBuffer.load(self._buffer_path)
        return ReplayBuffer(capacity=self.config.replay_capacity)

    def _persist_buffer_entries(self, examples: Sequence[ReplayExample]) -> None:
        """Append newly folded entries; load() re-applies capacity eviction."""
        if not self._buffer_path.exists():
            self.replay_buffer.save(self._buffer_path)
            return
        with open(self._buffer_path, "a", encoding="utf-8") as fh:
            for ex in examples:
                entry = ReplayExample(
                    image=ex.image,
                    task=ex.task,
                    target=ex.target,
                    source="correction",
                    inserted_at=ex.inserted_at,
                )
                fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")

    def _load_originals(self) -> list[ReplayExample]:
        if self.config.originals_path is None:
            return []
        raw = read_json(self.config.originals_path)
        examples = [ReplayExample.from_dict(entry) for entry in raw]
        if len(self.replay_buffer) == 0:
            self.replay_buffer.extend(examples)
            self.replay_buffer.save(self._buffer_path)
        return examples

    def _load_or_freeze_probe(self) -> list[ReplayExample]:
        if self._probe_path.exists():
            return [ReplayExample.from_dict(d) for d in read_json(self._probe_path)]
        if not self._originals:
            return []
        rng = random.Random(self.config.seed)
        size = min(self.config.probe_size, len(self._originals))
        probe = rng.sample(self._originals, size)
        atomic_write_json(self._probe_path, [e.to_dict() for e in probe])
        return probe

    def _recover(self) -> None:
        for raw in self.predictions_store.read_all():
            rec = self._prediction_from_dict(raw)
            self._predictions[rec.id] = rec
            self._pred_seq = max(self._pred_seq, rec.seq)
        resolved: set[str] = set()
        last_swap_idx = -1
        events = self.events_store.read_all()
        for i, ev in enumerate(events):
            if ev["kind"] == "swap":
                last_swap_idx = i
        for i, ev in enumerate(events):
            kind = ev["kind"]
            if kind == "swap":
                self.baseline_accuracy = ev.get("baseline")
            elif kind in (AccuracyWindow.CONFIRMED, AccuracyWindow.CORRECTED):
                resolved.add(ev["prediction_id"])
                rec = self._predictions.get(ev["prediction_id"])
                if rec is not None and rec.resolution is None:
                    rec.resolution = {k: v for k, v in ev.items() if k != "kind"} | {
                        "action": kind
                    }
                if i > last_swap_idx:
                    self.window.add(kind)
        for rec in sorted(self._predictions.values(), key=lambda r: r.seq):
            if rec.routing is not conf.RoutingDecision.AUTO_ACCEPT and rec.id not in resolved:
                self._queue.append(rec.id)
        for raw in self.jobs_store.read_all():
            self.jobs[raw["id"]] = raw
            self._job_seq = max(self._job_seq, int(raw["id"].split("-")[1]))
            if raw.get("round") is not None:
                self._training_rounds = max(self._training_rounds, int(raw["round"]))

    def _prediction_from_dict(self, d: dict) -> PredictionRecord:
        answers = {}
        for k, v in d["answers"].items():
            answers[TaskKind(k)] = ParsedAnswer(
                task=TaskKind(v["task"]),
                value=v["value"],
                hedge_terms=tuple(v["hedge_terms"]),
                format_validity=float(v["format_validity"]),
                raw_text=v["raw_text"],
            )
        breakdowns = {}
        for k, v in d["confidence"].items():
            breakdowns[TaskKind(k)] = conf.ConfidenceBreakdown(
                generation_prob=float(v["generation_prob"]),
                uncertainty_penalty=float(v["uncertainty_penalty"]),
                format_validity=float(v["format_validity"]),
                combined=float(v["combined"]),
            )
        return PredictionRecord(
            id=d["id"],
            seq=int(d["seq"]),
            image=ImageRef.from_dict(d["image"]),
            answers=answers,
            confidence=breakdowns,
            routing=conf.RoutingDecision(d["routing"]),
            model_version=int(d["model_version"]),
            latency={k: float(v) for k, v in d["latency"].items()},
            created_at=float(d["created_at"]),
            failures=dict(d.get("failures", {})),
            resolution=d.get("resolution"),
        )

    # -- backends -------------------------------------------------------------

    def current_backend(self) -> tuple[int, MockVlmBackend]:
        # This runtime is the registry's only in-process mutator, so the
        # active version is cached and invalidated on swap/rollback.
        version = self._current_version_cache
        if version is None:
            version = self.registry.current_version()
            self._current_version_cache = version
        if version is None:
            raise BackendUnavailable("no active model version")
        backend = self._backend_cache.get(version)
        if backend is None:
            script = self.registry.load_artifact(version, "script.json")
            backend = MockVlmBackend(script, version_tag=f"v{version}")
            self._backend_cache[version] = backend
        return version, backend

    # -- events ----------------------------------------------------------------

    def subscribe(self) -> Queue:
        q: Queue = Queue()
        with self._lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: Queue) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def _broadcast(self, event: dict) -> None:
        with self._lock:
            subs = list(self._subscribers)
        for q in subs:
            q.put(event)

    # -- recognize --------------------------------------------------------------

    def recognize(self, image: ImageRef, tasks: Sequence[TaskKind]) -> PredictionRecord:
        version, backend = self.current_backend()
        result = dispatch_all(image, set(tasks), backend, self.latency_log)

        answers: dict[TaskKind, ParsedAnswer] = {}
        breakdowns: dict[TaskKind, conf.ConfidenceBreakdown] = {}
        pcfg = self.config.parser
        for task, raw in sorted(result.responses.items(), key=lambda kv: kv[0].value):
            try:
                answer = parse(raw, self.lexicon, self.config.format_rules, pcfg)
            except ParseFailure:
                # No extractable value: keep the raw text for the operator,
                # score it malformed so it routes toward re-capture.
                hedges = self._hedges(raw.text)
                answer = ParsedAnswer(
                    task=task,
                    value="",
                    hedge_terms=hedges,
                    format_validity=pcfg.malformed_validity,
                    raw_text=raw.text,
                )
            answers[task] = answer
            penalty = min(
                pcfg.penalty_per_hedge * len(answer.hedge_terms), pcfg.penalty_cap
            )
            breakdowns[task] = conf.combine(
                conf.generation_probability(raw.token_probs),
                penalty,
                answer.format_validity,
            )

        routing = self._route(tasks, breakdowns)
        agg: dict[str, float] = {}
        for raw in result.responses.values():
            for stage, ms in raw.component_timings.items():
                agg[stage] = agg.get(stage, 0.0) + float(ms)

        with self._lock:
            self._pred_seq += 1
            rec = PredictionRecord(
                id=f"pred-{self._pred_seq}",
                seq=self._pred_seq,
                image=image,
                answers=answers,
                confidence=breakdowns,
                routing=routing,
                model_version=version,
                latency=agg,
                created_at=time.time(),
                failures={t.value: msg for t, msg in result.failures.items()},
            )
            self._predictions[rec.id] = rec
            self.predictions_store.append(rec.to_dict())
            if routing is not conf.RoutingDecision.AUTO_ACCEPT:
                self._queue.append(rec.id)
        if routing is not conf.RoutingDecision.AUTO_ACCEPT:
            self._broadcast({"type": "queue_add", "item": rec.to_dict()})
        return rec

    def _hedges(self, text: str) -> tuple[str, ...]:
        found, _ = detect_hedging(
            text,
            self.config.parser.hedge_terms,
            self.config.parser.penalty_per_hedge,
            self.config.parser.penalty_cap,
        )
        return tuple(found)

    def _route(
        self,
        tasks: Sequence[TaskKind],
        breakdowns: Mapping[TaskKind, conf.ConfidenceBreakdown],
    ) -> conf.RoutingDecision:
        # Plate confidence drives routing; a failed plate dispatch cannot be
        # trusted, so it is rejected outright. Without a plate task the most
        # conservative per-task score decides.
        if TaskKind.PLATE_RECOGNITION in tasks:
            b = breakdowns.get(TaskKind.PLATE_RECOGNITION)
            if b is None:
                return conf.RoutingDecision.AUTO_REJECT
            return conf.route(b.combined, self.config.routing)
        if not breakdowns:
            return conf.RoutingDecision.AUTO_REJECT
        worst = min(b.combined for b in breakdowns.values())
        return conf.route(worst, self.config.routing)

    # -- review queue -----------------------------------------------------------

    def review_queue(self, limit: int = 50, cursor: Optional[str] = None) -> dict:
        if limit < 1:
            raise BadCursor("limit must be >= 1")
        after_seq = 0
        if cursor is not None:
            try:
                after_seq = int(cursor)
            except ValueError:
                raise BadCursor(f"malformed cursor {cursor!r}")
        with self._lock:
            pending = [self._predictions[pid] for pid in self._queue]
        items = [r for r in pending if r.seq > after_seq][:limit]
        next_cursor = str(items[-1].seq) if len(items) == limit else None
        return {
            "items": [r.to_dict() for r in items],
            "next_cursor": next_cursor,
            "pending_total": len(pending),
        }

    def _take_pending(self, prediction_id: str) -> PredictionRecord:
        rec = self._predictions.get(prediction_id)
        if rec is None:
            raise UnknownPrediction(prediction_id)
        if rec.resolution is not None or prediction_id not in self._queue:
            raise AlreadyResolved(prediction_id)
        return rec

    def confirm(self, prediction_id: str, operator_id: str) -> PredictionRecord:
        with self._lock:
            rec = self._take_pending(prediction_id)
            plate = rec.answers.get(TaskKind.PLATE_RECOGNITION)
            event = {
                "kind": AccuracyWindow.CONFIRMED,
                "prediction_id": prediction_id,
                "operator_id": operator_id,
                "at": time.time(),
                "plate_predicted": plate.value if plate else None,
                "plate_truth": plate.value if plate else None,
                "confidence": rec.confidence[TaskKind.PLATE_RECOGNITION].combined
                if TaskKind.PLATE_RECOGNITION in rec.confidence
                else None,
            }
            self.events_store.append(event)
            self.window.add(AccuracyWindow.CONFIRMED)
            rec.resolution = {
                "action": "confirmed",
                "operator_id": operator_id,
                "at": event["at"],
            }
            self._queue.remove(prediction_id)
        self._broadcast({"type": "resolved", "prediction_id": prediction_id, "action": "confirmed"})
        return rec

    def correct(
        self,
        prediction_id: str,
        operator_id: str,
        corrections: Mapping[TaskKind, str],
    ) -> tuple[PredictionRecord, Optional[str]]:
        """Apply operator corrections to a pending prediction.

        Raises CorrectionRejected when nothing could be recorded (the item
        stays pending). On success the review item resolves, the accuracy
        window gains a `corrected` outcome, and the training trigger is
        consulted; a fired trigger returns the started job id.
        """
        if not corrections:
            raise CorrectionRejected({"_": "no corrected values supplied"})
        with self._lock:
            rec = self._take_pending(prediction_id)
            statuses: dict[str, str] = {}
            reject_reasons: dict[str, str] = {}
            recorded: list[CorrectionRecord] = []
            for task, value in sorted(corrections.items(), key=lambda kv: kv[0].value):
                normalized = self._normalize_corrected(task, value)
                original = rec.answers[task].value if task in rec.answers else ""
                if normalized == original:
                    statuses[task.value] = "no_change"
                    continue
                correction = CorrectionRecord(
                    id=f"corr-{rec.seq}-{task.value}",
                    image=rec.image,
                    task=task,
                    original_value=original,
                    corrected_value=normalized,
                    operator_id=operator_id,
                    created_at=time.time(),
                )
                result = self.corrections.ingest(
                    correction,
                    self.config.quality,
                    self.config.format_rules,
                    self.config.parser.malformed_validity,
                )
                statuses[task.value] = result.status.value
                if result.status is CorrectionStatus.REJECTED:
                    reject_reasons[task.value] = result.reason or "rejected"
                else:
                    recorded.append(correction)
            if not recorded:
                if not reject_reasons:
                    reject_reasons = {"_": "corrected values match the prediction"}
                raise CorrectionRejected(reject_reasons)

            plate_corr = next(
                (c for c in recorded if c.task is TaskKind.PLATE_RECOGNITION), None
            )
            plate = rec.answers.get(TaskKind.PLATE_RECOGNITION)
            event = {
                "kind": AccuracyWindow.CORRECTED,
                "prediction_id": prediction_id,
                "operator_id": operator_id,
                "at": time.time(),
                "plate_predicted": plate.value if plate else None,
                "plate_truth": plate_corr.corrected_value
                if plate_corr
                else (plate.value if plate else None),
                "confidence": rec.confidence[TaskKind.PLATE_RECOGNITION].combined
                if TaskKind.PLATE_RECOGNITION in rec.confidence
                else None,
            }
            self.events_store.append(event)
            self.window.add(AccuracyWindow.CORRECTED)
            rec.resolution = {
                "action": "corrected",
                "operator_id": operator_id,
                "at": event["at"],
                "statuses": statuses,
            }
            self._queue.remove(prediction_id)
        self._broadcast(
            {
                "type": "resolved",
                "prediction_id": prediction_id,
                "action": "corrected",
                "pending_corrections": self.corrections.pending_count(),
            }
        )
        job_id = self.maybe_start_training()
        return rec, job_id

    def _normalize_corrected(self, task: TaskKind, value: str) -> str:
        if task is TaskKind.PLATE_RECOGNITION:
            try:
                return normalize_plate(value, self.config.parser.hedge_terms)
            except Exception:
                return value.strip().upper().replace(" ", "").replace("-", "")
        if task is TaskKind.STATE_CLASSIFICATION:
            resolved = resolve_state(value, self.lexicon)
            return resolved if resolved is not None else value.strip()
        return value.strip()

    # -- training ----------------------------------------------------------------

    def trigger_state(self) -> TriggerState:
        # The drop signal only becomes meaningful once the window holds a
        # minimum number of outcomes; a one-sample estimate right after a
        # swap would fire spurious retrainings.
        current_acc = None
        if len(self.window) >= self.config.drop_min_window:
            current_acc = self.window.accuracy()
        return TriggerState(
            pending_count=self.corrections.pending_count(),
            oldest_pending_at=self.corrections.oldest_pending_at(),
            baseline_accuracy=self.baseline_accuracy,
            current_accuracy=current_acc,
        )

    def maybe_start_training(self) -> Optional[str]:
        """Trigger check and job start, atomic under the job lock."""
        with self._job_lock:
            if self._training_active:
                return None
            reason = should_train(self.trigger_state(), self.config.trigger, time.time())
            if reason is None:
                return None
            self._training_active = True
            self._job_seq += 1
            job_id = f"job-{self._job_seq}"
            self._training_rounds += 1
            job = {
                "id": job_id,
                "round": self._training_rounds,
                "reason": reason.value,
                "status": "running",
                "started_at": time.time(),
            }
            self.jobs[job_id] = job
        if self.train_sync:
            self._run_training_job(job_id)
        else:
            thread = threading.Thread(
                target=self._run_training_job, args=(job_id,), daemon=True
            )
            thread.start()
        return job_id

    def _run_training_job(self, job_id: str) -> None:
        # Work on a copy and publish it with one assignment so concurrent
        # readers of the job record never see a half-updated dict.
        job = dict(self.jobs[job_id])
        try:
            outcome = self._train_once(job)
            job.update(outcome)
            job["status"] = "completed"
        except TrainerFailure as exc:
            job["status"] = "failed"
            job["error"] = str(exc)
        except Exception as exc:  # defensive: a failed job must not wedge the service
            job["status"] = "failed"
            job["error"] = f"{type(exc).__name__}: {exc}"
        finally:
            job["finished_at"] = time.time()
            self.jobs[job_id] = job
            self.jobs_store.append(job)
            with self._job_lock:
                self._training_active = False
        self._broadcast({"type": "job_finished", "job": job})
        if not self.train_sync and job["status"] == "completed":
            self.maybe_start_training()

    def _train_once(self, job: dict) -> dict:
        pending = self.corrections.pending()
        corr_examples = [
            ReplayExample(
                image=c.image,
                task=c.task,
                target=c.corrected_value,
                source="correction",
                inserted_at=c.created_at,
            )
            for c in pending
        ]
        prod_version, prod_backend = self.current_backend()
        round_seed = self.config.seed * 1_000_003 + self._training_rounds
        new_version = self.registry.next_version()
        trainer = MockTrainer(
            base_script=prod_backend.script,
            version=new_version,
            replay_share=self.config.mix.replay_share,
            forgetting=self.config.trainer.forgetting(),
            seed=round_seed,
            corrections=corr_examples,
        )
        candidate = run_update(
            corrections=corr_examples,
            buffer=self.replay_buffer,
            mix=self.config.mix,
            weights=self.config.task_weights,
            trainer=trainer,
            steps=self.config.trainer.steps,
            hyperparams=self.config.trainer.hyperparams,
            rng_seed=round_seed,
            correction_ids=[c.id for c in pending],
            now=time.time(),
        )
        # Trainer succeeded: the batch is consumed whatever the gate says;
        # retraining on the identical batch would only repeat the outcome.
        self.corrections.mark_consumed([c.id for c in pending])
        self._persist_buffer_entries(corr_examples)

        cand_backend = MockVlmBackend(candidate.script, version_tag=f"v{new_version}")
        prod_scores = [
            1.0 if _answer_matches(prod_backend, ex.image, ex.task, ex.target) else 0.0
            for ex in corr_examples
        ]
        cand_scores = [
            1.0 if _answer_matches(cand_backend, ex.image, ex.task, ex.target) else 0.0
            for ex in corr_examples
        ]
        if self.probe:
            prod_probe = sum(
                1.0 if _answer_matches(prod_backend, e.image, e.task, e.target) else 0.0
                for e in self.probe
            ) / len(self.probe)
            cand_probe = sum(
                1.0 if _answer_matches(cand_backend, e.image, e.task, e.target) else 0.0
                for e in self.probe
            ) / len(self.probe)
        else:
            prod_probe = cand_probe = 1.0
        if len(prod_scores) < 2:
            # Too few paired samples to demonstrate significance; the gate
            # cannot pass, but the job itself completed.
            deltas = [c - p for p, c in zip(prod_scores, cand_scores)]
            report = GateReport(
                n=len(deltas),
                mean_delta=sum(deltas) / len(deltas) if deltas else 0.0,
                t_statistic=0.0,
                p_value=1.0,
                forgetting_drop=prod_probe - cand_probe,
                decision=GateDecision.REJECT,
                reject_cause=RejectCause.NOT_SIGNIFICANT,
                alpha=self.config.gate.alpha,
                forgetting_limit=self.config.gate.forgetting_limit,
            )
        else:
            report = evaluate_gate(
                prod_scores,
                cand_scores,
                prod_probe,
                cand_probe,
                alpha=self.config.gate.alpha,
                forgetting_limit=self.config.gate.forgetting_limit,
            )
        published = self.registry.publish(
            {
                "script.json": candidate.script,
                "job.json": {
                    "job_id": job["id"],
                    "reason": job["reason"],
                    "consumed_corrections": [c.id for c in pending],
                    "hyperparams": candidate.hyperparams,
                    "mix": {
                        "correction_ratio": self.config.mix.correction_ratio,
                        "batch_size": self.config.mix.batch_size,
                    },
                    "steps": self.config.trainer.steps,
                    "seed": round_seed,
                },
            },
            gate_report=report,
            version=new_version,
        )
        deployed = False
        if report.decision is GateDecision.DEPLOY:
            self.registry.activate(published.version)
            self._current_version_cache = None
            baseline = None
            if len(self.window) > 0:
                baseline = self.window.accuracy()
            self.baseline_accuracy = baseline
            self.window.reset()
            self.events_store.append(
                {"kind": "swap", "version": published.version, "baseline": baseline, "at": time.time()}
            )
            deployed = True
            self._broadcast({"type": "model_swap", "version": published.version})
        return {
            "candidate_version": published.version,
            "consumed": len(pending),
            "gate": report.to_dict(),
            "deployed": deployed,
            "probe_accuracy": {"production": prod_probe, "candidate": cand_probe},
        }

    # -- metrics / models ----------------------------------------------------------

    def labeled_pairs(self) -> list[metrics_mod.EvalPair]:
        pairs = []
        for ev in self.events_store.read_all():
            if ev["kind"] not in (AccuracyWindow.CONFIRMED, AccuracyWindow.CORRECTED):
                continue
            predicted = ev.get("plate_predicted")
            truth = ev.get("plate_truth")
            if predicted is None or truth is None or not truth:
                continue
            pairs.append(
                metrics_mod.EvalPair(
                    predicted=predicted,
                    truth=truth,
                    confidence=float(ev.get("confidence") or 0.0),
                )
            )
        return pairs

    def metrics_snapshot(self) -> dict:
        with self._lock:
            total = len(self._predictions)
            routing_counts = {d.value: 0 for d in conf.RoutingDecision}
            for rec in self._predictions.values():
                routing_counts[rec.routing.value] += 1
            pending_review = len(self._queue)
        fractions = {
            k: (v / total if total else 0.0) for k, v in routing_counts.items()
        }
        rolling = None
        if len(self.window) > 0:
            rolling = self.window.accuracy()
        pairs = self.labeled_pairs()
        labeled: dict = {"count": len(pairs)}
        if pairs:
            value, bins = metrics_mod.ece(pairs, 10)
            labeled.update(
                {
                    "cer": metrics_mod.cer(pairs),
                    "plate_accuracy": metrics_mod.plate_accuracy(pairs),
                    "ece": value,
                    "bins": [b.to_dict() for b in bins],
                }
            )
        samples = self.latency_log.samples()
        latency = latency_report(samples).to_dict() if samples else None
        return {
            "total_predictions": total,
            "routing_counts": routing_counts,
            "routing_fractions": fractions,
            "pending_review": pending_review,
            "pending_corrections": self.corrections.pending_count(),
            "secondary_review": len(self.corrections.secondary_review()),
            "rolling_accuracy": rolling,
            "baseline_accuracy": self.baseline_accuracy,
            "labeled": labeled,
            "latency": latency,
            "model_version": self.registry.current_version(),
            "trigger": {
                "min_corrections": self.config.trigger.min_corrections,
                "max_corrections": self.config.trigger.max_corrections,
                "time_threshold_hours": self.config.trigger.time_threshold_hours,
                "accuracy_drop_threshold": self.config.trigger.accuracy_drop_threshold,
            },
            "training_rounds": self._training_rounds,
        }

    def models_listing(self) -> dict:
        return {
            "current": self.registry.current_version(),
            "previous": self.registry.previous_version(),
            "versions": [m.to_dict() for m in self.registry.listing()],
        }

    def rollback(self) -> dict:
        current, previous = self.registry.rollback()
        self._current_version_cache = None
        self.baseline_accuracy = None
        self.window.reset()
        self.events_store.append(
            {"kind": "swap", "version": current, "baseline": None, "at": time.time()}
        )
        self._broadcast({"type": "model_swap", "version": current})
        return {"current": current, "previous": previous}
