"""Correction capture with quality gates, rolling accuracy, training triggers.

Operator corrections pass three gates before landing in the durable log:
minimum image quality, duplicate suppression keyed on (digest, task,
corrected value), and a plate-format consistency check that shunts
implausible corrections to a secondary-review queue instead of training.

The trigger engine decides when accumulated corrections justify a
retraining run. Reasons are checked in fixed precedence order so identical
state always yields the same reason.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

from .parsing import PlateFormatRule, validate_format
from .stores import JsonlStore
from .vqa import ImageRef, TaskKind


class CorrectionStatus(str, Enum):
    ACCEPTED = "accepted"
    SECONDARY_REVIEW = "secondary_review"
    REJECTED = "rejected"


class RejectReason(str, Enum):
    QUALITY_BELOW_THRESHOLD = "quality_below_threshold"
    DUPLICATE = "duplicate"


@dataclass
class CorrectionRecord:
    id: str
    image: ImageRef
    task: TaskKind
    original_value: str
    corrected_value: str
    operator_id: str
    created_at: float
    status: CorrectionStatus = CorrectionStatus.ACCEPTED
    reject_reason: Optional[str] = None

    def __post_init__(self):
        if self.corrected_value == self.original_value:
            raise ValueError("corrected_value must differ from original_value")

    def dedupe_key(self) -> tuple[str, str, str]:
        return (self.image.digest, self.task.value, self.corrected_value)

    def to_dict(self) -> dict:
        return {
            "kind": "correction",
            "id": self.id,
            "image": self.image.to_dict(),
            "task": self.task.value,
            "original_value": self.original_value,
            "corrected_value": self.corrected_value,
            "operator_id": self.operator_id,
            "created_at": self.created_at,
            "status": self.status.value,
            "reject_reason": self.reject_reason,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorrectionRecord":
        rec = cls.__new__(cls)
        rec.id = d["id"]
        rec.image = ImageRef.from_dict(d["image"])
        rec.task = TaskKind(d["task"])
        rec.original_value = d["original_value"]
        rec.corrected_value = d["corrected_value"]
        rec.operator_id = d["operator_id"]
        rec.created_at = float(d["created_at"])
        rec.status = CorrectionStatus(d["status"])
        rec.reject_reason = d.get("reject_reason")
        return rec


@dataclass(frozen=True)
class QualityConfig:
    min_quality_score: float = 0.30


@dataclass
class IngestResult:
    status: CorrectionStatus
    reason: Optional[str] = None


class CorrectionLog:
    """Durable correction event log with replayable pending state.

    Two event kinds share the file: correction records and consumption
    markers written when a training run takes a batch of pending
    corrections. Replaying the file reconstructs the dedupe set, the
    pending queue, and the secondary-review queue after a crash. Appends
    fsync so an acknowledged correction survives power loss; a single
    writer lock serializes mutations.
    """

    def __init__(self, path: str | Path):
        self._store = JsonlStore(path, fsync=True)
        self._lock = threading.Lock()
        self._seen: set[tuple[str, str, str]] = set()
        self._pending: list[CorrectionRecord] = []
        self._secondary: list[CorrectionRecord] = []
        self._replay()

    def _replay(self) -> None:
        consumed: set[str] = set()
        records: list[CorrectionRecord] = []
        for event in self._store.read_all():
            if event.get("kind") == "consumed":
                consumed.update(event["correction_ids"])
            elif event.get("kind") == "correction":
                records.append(CorrectionRecord.from_dict(event))
        for rec in records:
            if rec.status is CorrectionStatus.ACCEPTED:
                self._seen.add(rec.dedupe_key())
                if rec.id not in consumed:
                    self._pending.append(rec)
            elif rec.status is CorrectionStatus.SECONDARY_REVIEW:
                self._seen.add(rec.dedupe_key())
                self._secondary.append(rec)

    def ingest(
        self,
        record: CorrectionRecord,
        quality: QualityConfig = QualityConfig(),
        format_rules: Sequence[PlateFormatRule] = (),
        malformed_validity: float = 0.1,
    ) -> IngestResult:
        """Run the quality gates and durably record the correction.

        Gate order: image quality, duplicate, format consistency. Only the
        plate task is format-checked; a corrected plate that fails every
        rule outright is queued for secondary review rather than trained on.
        """
        with self._lock:
            if record.image.quality_score < quality.min_quality_score:
                record.status = CorrectionStatus.REJECTED
                record.reject_reason = RejectReason.QUALITY_BELOW_THRESHOLD.value
                return IngestResult(record.status, record.reject_reason)
            if record.dedupe_key() in self._seen:
                record.status = CorrectionStatus.REJECTED
                record.reject_reason = RejectReason.DUPLICATE.value
                return IngestResult(record.status, record.reject_reason)
            if record.task is TaskKind.PLATE_RECOGNITION and format_rules:
                validity = validate_format(
                    record.corrected_value, format_rules, malformed_validity=malformed_validity
                )
                if validity == malformed_validity:
                    record.status = CorrectionStatus.SECONDARY_REVIEW
                    self._store.append(record.to_dict())  # may raise StorageFailure
                    self._seen.add(record.dedupe_key())
                    self._secondary.append(record)
                    return IngestResult(record.status)
            record.status = CorrectionStatus.ACCEPTED
            self._store.append(record.to_dict())  # may raise StorageFailure
            self._seen.add(record.dedupe_key())
            self._pending.append(record)
            return IngestResult(record.status)

    def pending(self) -> list[CorrectionRecord]:
        with self._lock:
            return list(self._pending)

    def pending_count(self) -> int:
        with self._lock:
            return len(self._pending)

    def oldest_pending_at(self) -> Optional[float]:
        with self._lock:
            return min((r.created_at for r in self._pending), default=None)

    def secondary_review(self) -> list[CorrectionRecord]:
        with self._lock:
            return list(self._secondary)

    def mark_consumed(self, correction_ids: Sequence[str]) -> None:
        """Record that a training run took these corrections."""
        ids = set(correction_ids)
        with self._lock:
            self._store.append({"kind": "consumed", "correction_ids": sorted(ids)})
            self._pending = [r for r in self._pending if r.id not in ids]


class EmptyWindow(Exception):
    pass


class AccuracyWindow:
    """Fixed-size ring of review outcomes for the online accuracy estimate."""

    CONFIRMED = "confirmed"
    CORRECTED = "corrected"

    def __init__(self, window_size: int = 500):
        if window_size < 1:
            raise ValueError("window_size must be >= 1")
        self.window_size = window_size
        self._events: list[str] = []
        self._lock = threading.Lock()

    def add(self, event: str) -> None:
        if event not in (self.CONFIRMED, self.CORRECTED):
            raise ValueError(f"unknown event {event!r}")
        with self._lock:
            self._events.append(event)
            if len(self._events) > self.window_size:
                self._events = self._events[-self.window_size :]

    def reset(self) -> None:
        with self._lock:
            self._events = []

    def __len__(self) -> int:
        with self._lock:
            return len(self._events)

    def accuracy(self) -> float:
        return rolling_accuracy(self)

    def counts(self) -> tuple[int, int]:
        with self._lock:
            confirmed = sum(1 for e in self._events if e == self.CONFIRMED)
            return confirmed, len(self._events) - confirmed


def rolling_accuracy(window: AccuracyWindow) -> float:
    """confirmed / (confirmed + corrected) over the window."""
    confirmed, corrected = window.counts()
    if confirmed + corrected == 0:
        raise EmptyWindow("no review outcomes in window")
    return confirmed / (confirmed + corrected)


@dataclass(frozen=True)
class TriggerConfig:
    min_corrections: int = 50
    max_corrections: int = 500
    time_threshold_hours: float = 4.0
    accuracy_drop_threshold: float = 0.05

    def __post_init__(self):
        if not 0 < self.min_corrections <= self.max_corrections:
            raise ValueError("need 0 < min_corrections <= max_corrections")
        if self.time_threshold_hours <= 0 or self.accuracy_drop_threshold <= 0:
            raise ValueError("thresholds must be positive")


@dataclass
class TriggerState:
    pending_count: int
    oldest_pending_at: Optional[float] = None  # epoch seconds
    baseline_accuracy: Optional[float] = None
    current_accuracy: Optional[float] = None


class TrainReason(str, Enum):
    BUFFER_FULL = "buffer_full"
    TIME_ELAPSED = "time_elapsed"
    ACCURACY_DROP = "accuracy_drop"


def should_train(
    state: TriggerState,
    config: TriggerConfig = TriggerConfig(),
    now: float = 0.0,
) -> Optional[TrainReason]:
    """Pure trigger decision; None means no training.

    Precedence is fixed: a full buffer wins over the time condition, which
    wins over the accuracy-drop condition. The time condition is inclusive
    at the threshold; the accuracy drop is strict.
    """
    if state.pending_count >= config.max_corrections:
        return TrainReason.BUFFER_FULL
    if (
        state.pending_count >= config.min_corrections
        and state.oldest_pending_at is not None
        and (now - state.oldest_pending_at) >= config.time_threshold_hours * 3600.0
    ):
        return TrainReason.TIME_ELAPSED
    if (
        state.baseline_accuracy is not None
        and state.current_accuracy is not None
        and (state.baseline_accuracy - state.current_accuracy) > config.accuracy_drop_threshold
        and state.pending_count >= 1
    ):
        return TrainReason.ACCURACY_DROP
    return None
