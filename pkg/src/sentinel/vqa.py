"""Multi-task visual question answering: prompt catalog, backends, dispatch.

The inference backend is an opaque function from (image reference, prompt)
to generated text plus per-token probabilities. Production would put a
vision-language model behind this interface; the shipped implementation is
a deterministic scripted mock so the whole orchestration loop runs at desk
scale with no ML runtime.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Protocol

from .stores import JsonlStore


class TaskKind(str, Enum):
    PLATE_RECOGNITION = "plate_recognition"
    STATE_CLASSIFICATION = "state_classification"
    MAKE_MODEL = "make_model"
    COLOR_DESCRIPTION = "color_description"
    SEATBELT_DETECTION = "seatbelt_detection"
    OCCUPANCY_COUNT = "occupancy_count"


@dataclass(frozen=True)
class VqaPrompt:
    task: TaskKind
    question: str
    expected_format: str


PROMPT_CATALOG: dict[TaskKind, VqaPrompt] = {
    TaskKind.PLATE_RECOGNITION: VqaPrompt(
        TaskKind.PLATE_RECOGNITION,
        "What is the license plate number in this image?",
        'Alphanumeric string (e.g., "ABC1234")',
    ),
    TaskKind.STATE_CLASSIFICATION: VqaPrompt(
        TaskKind.STATE_CLASSIFICATION,
        "What US state is this license plate from?",
        'Full state name (e.g., "Texas", "California")',
    ),
    TaskKind.MAKE_MODEL: VqaPrompt(
        TaskKind.MAKE_MODEL,
        "What is the make and model of this vehicle?",
        '"Make Model" (e.g., "Toyota Camry")',
    ),
    TaskKind.COLOR_DESCRIPTION: VqaPrompt(
        TaskKind.COLOR_DESCRIPTION,
        "What color is this vehicle?",
        'Color name (e.g., "Red", "White")',
    ),
    TaskKind.SEATBELT_DETECTION: VqaPrompt(
        TaskKind.SEATBELT_DETECTION,
        "Is the driver wearing a seatbelt?",
        '"Yes", "No", or "Cannot determine"',
    ),
    TaskKind.OCCUPANCY_COUNT: VqaPrompt(
        TaskKind.OCCUPANCY_COUNT,
        "How many people are visible in this vehicle?",
        'Integer or "Cannot determine"',
    ),
}

# Timing stages recorded per response. Covers both the coarse
# encode/generate/parse decomposition and the finer preprocess/tokenize one.
TIMING_STAGES = ("preprocess", "tokenize", "encode", "generate", "parse")


def prompt_for(task: TaskKind) -> VqaPrompt:
    """Catalog lookup; total over the task enumeration."""
    return PROMPT_CATALOG[task]


@dataclass(frozen=True)
class ImageRef:
    """Reference to an image by content digest; pixels never enter the system.

    `digest` is a stable 256-bit content hash (hex). `quality_score` is a
    caller-supplied [0,1] capture-quality signal used for correction gating.
    """

    id: str
    digest: str
    width: int = 0
    height: int = 0
    quality_score: float = 1.0

    def __post_init__(self):
        if not self.digest:
            raise ValueError("image digest required")
        if not 0.0 <= self.quality_score <= 1.0:
            raise ValueError(f"quality_score must be in [0,1], got {self.quality_score}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "digest": self.digest,
            "width": self.width,
            "height": self.height,
            "quality_score": self.quality_score,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ImageRef":
        return cls(
            id=d["id"],
            digest=d["digest"],
            width=int(d.get("width", 0)),
            height=int(d.get("height", 0)),
            quality_score=float(d.get("quality_score", 1.0)),
        )


@dataclass(frozen=True)
class RawResponse:
    task: TaskKind
    text: str
    token_probs: tuple[float, ...]
    component_timings: Mapping[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "text": self.text,
            "token_probs": list(self.token_probs),
            "component_timings": dict(self.component_timings),
        }


class InferenceBackend(Protocol):
    """Anything that answers a visual question about a referenced image."""

    version_tag: str

    def answer(self, image: ImageRef, prompt: VqaPrompt) -> RawResponse: ...


class InvalidScript(Exception):
    """Mock script contains a token probability outside (0, 1]."""


class BackendFailure(Exception):
    def __init__(self, task: TaskKind, reason: str = "backend error"):
        super().__init__(f"{task.value}: {reason}")
        self.task = task
        self.reason = reason


class EmptyTaskSet(Exception):
    """dispatch_all called with no tasks."""


def script_key(digest: str, task: TaskKind) -> str:
    return f"{digest}/{task.value}"


DEFAULT_FALLBACK_TEXT = "UNKNOWN"
DEFAULT_FALLBACK_PROB = 0.10


class MockVlmBackend:
    """Deterministic scripted stand-in for the fine-tuned model.

    The script maps `"<digest>/<task>"` to `{"text": ..., "token_probs": [...]}`.
    Unscripted pairs fall back to a fixed low-probability answer so unknown
    images route to auto-reject. answer() is a pure function of
    (image digest, prompt text, version_tag) and safe for concurrent use.
    """

    def __init__(
        self,
        script: Mapping[str, Mapping] | None = None,
        version_tag: str = "mock-v0",
        fallback_text: str = DEFAULT_FALLBACK_TEXT,
        fallback_prob: float = DEFAULT_FALLBACK_PROB,
        fail_tasks: set[TaskKind] | None = None,
    ):
        self.script = dict(script or {})
        self.version_tag = version_tag
        self.fallback_text = fallback_text
        self.fallback_prob = fallback_prob
        self.fail_tasks = set(fail_tasks or ())
        for key, entry in self.script.items():
            for p in entry["token_probs"]:
                if not 0.0 < p <= 1.0:
                    raise InvalidScript(f"token prob {p} for {key!r} outside (0,1]")

    def answer(self, image: ImageRef, prompt: VqaPrompt) -> RawResponse:
        if prompt.task in self.fail_tasks:
            raise BackendFailure(prompt.task, "injected failure")
        entry = self.script.get(script_key(image.digest, prompt.task))
        if entry is None:
            text, probs = self.fallback_text, (self.fallback_prob,)
        else:
            text, probs = entry["text"], tuple(entry["token_probs"])
        return RawResponse(
            task=prompt.task,
            text=text,
            token_probs=probs,
            component_timings=self._timings(image.digest, prompt.task),
        )

    def _timings(self, digest: str, task: TaskKind) -> dict[str, float]:
        # Synthetic but deterministic per (digest, task): a stable jitter
        # around the typical stage costs, derived from a content hash so
        # repeated runs (and separate processes) see identical timings.
        h = hashlib.sha256(f"{digest}/{task.value}".encode()).digest()
        jitter = (h[0] % 21) - 10  # -10..+10 ms
        return {
            "preprocess": 12.0,
            "tokenize": 6.0,
            "encode": 45.0,
            "generate": 89.0 + float(jitter),
            "parse": 18.0,
        }


def mock_backend(
    script: Mapping[str, Mapping],
    version_tag: str = "mock-v0",
    fallback_text: str = DEFAULT_FALLBACK_TEXT,
    fallback_prob: float = DEFAULT_FALLBACK_PROB,
) -> MockVlmBackend:
    return MockVlmBackend(script, version_tag, fallback_text, fallback_prob)


@dataclass
class DispatchResult:
    responses: dict[TaskKind, RawResponse]
    failures: dict[TaskKind, str]


class LatencyLog:
    """Append-only log of per-request component timings (one sample per line)."""

    def __init__(self, path=None):
        self._store = JsonlStore(path) if path is not None else None
        self._samples: list[dict[str, float]] = []
        self._lock = threading.Lock()
        if self._store is not None:
            self._samples = [dict(r) for r in self._store.read_all()]

    def record(self, timings: Mapping[str, float]) -> None:
        sample = {k: float(v) for k, v in timings.items()}
        with self._lock:
            self._samples.append(sample)
            if self._store is not None:
                self._store.append(sample)

    def samples(self) -> list[dict[str, float]]:
        with self._lock:
            return list(self._samples)


def dispatch_all(
    image: ImageRef,
    tasks: set[TaskKind],
    backend: InferenceBackend,
    latency_log: LatencyLog | None = None,
    executor: concurrent.futures.Executor | None = None,
) -> DispatchResult:
    """Ask the backend every requested question about one image.

    Every requested task ends up either in `responses` or in `failures`
    — nothing is silently dropped. Task queries run sequentially unless an
    executor is supplied (backends must tolerate concurrent calls either
    way). The aggregated component timings of the successful responses are
    appended to the latency log as one sample.
    """
    if not tasks:
        raise EmptyTaskSet("dispatch_all requires at least one task")
    ordered = sorted(tasks, key=lambda t: t.value)
    responses: dict[TaskKind, RawResponse] = {}
    failures: dict[TaskKind, str] = {}

    def _one(task: TaskKind) -> RawResponse:
        return backend.answer(image, prompt_for(task))

    if executor is None:
        outcomes = []
        for task in ordered:
            try:
                outcomes.append((task, _one(task), None))
            except Exception as exc:
                outcomes.append((task, None, exc))
    else:
        futures = [(task, executor.submit(_one, task)) for task in ordered]
        outcomes = []
        for task, fut in futures:
            try:
                outcomes.append((task, fut.result(), None))
            except Exception as exc:
                outcomes.append((task, None, exc))
    for task, response, exc in outcomes:
        if exc is None:
            responses[task] = response
        elif isinstance(exc, BackendFailure):
            failures[task] = exc.reason
        else:  # backend bug: enumerate, don't drop
            failures[task] = str(exc)

    if latency_log is not None and responses:
        agg: dict[str, float] = {}
        for resp in responses.values():
            for stage, ms in resp.component_timings.items():
                agg[stage] = agg.get(stage, 0.0) + float(ms)
        latency_log.record(agg)
    return DispatchResult(responses=responses, failures=failures)


class EmptySamples(Exception):
    """latency_report called with no samples."""


@dataclass
class LatencyReport:
    count: int
    mean_total_ms: float
    per_component: dict[str, dict[str, float]]  # stage -> {mean_ms, share}
    percentiles: dict[str, float]  # p50/p90/p95/p99 of per-sample totals

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean_total_ms": self.mean_total_ms,
            "per_component": self.per_component,
            "percentiles": self.percentiles,
        }


def _nearest_rank(sorted_values: list[float], pct: float) -> float:
    # Nearest-rank percentile: the ceil(pct/100 * n)-th smallest, 1-indexed.
    n = len(sorted_values)
    rank = max(1, math.ceil(pct / 100.0 * n))
    return sorted_values[rank - 1]


def latency_report(samples: list[Mapping[str, float]]) -> LatencyReport:
    """Per-component means and shares plus nearest-rank total percentiles."""
    if not samples:
        raise EmptySamples("no latency samples")
    totals = []
    sums: dict[str, float] = {}
    for sample in samples:
        total = 0.0
        for stage, ms in sample.items():
            sums[stage] = sums.get(stage, 0.0) + float(ms)
            total += float(ms)
        totals.append(total)
    n = len(samples)
    mean_total = sum(totals) / n
    per_component = {}
    for stage, s in sums.items():
        mean_ms = s / n
        share = mean_ms / mean_total if mean_total > 0 else 0.0
        per_component[stage] = {"mean_ms": mean_ms, "share": share}
    ordered = sorted(totals)
    percentiles = {
        "p50": _nearest_rank(ordered, 50),
        "p90": _nearest_rank(ordered, 90),
        "p95": _nearest_rank(ordered, 95),
        "p99": _nearest_rank(ordered, 99),
    }
    return LatencyReport(
        count=n,
        mean_total_ms=mean_total,
        per_component=per_component,
        percentiles=percentiles,
    )
