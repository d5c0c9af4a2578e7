"""Experience replay buffer, batch mixing, loss weighting, mock trainer.

Retraining batches blend fresh operator corrections with replayed original
examples at a configurable ratio so the model keeps what it already knows
while absorbing fixes. The buffer is bounded FIFO. The trainer interface is
pluggable; the shipped mock "trains" by patching a copy of the scripted
backend: every correction in the batches is learned outright, while
pre-existing script entries are dropped with a probability that grows as
the replay share shrinks, reproducing the catastrophic-forgetting trend
without gradients.
"""

from __future__ import annotations

import json
import math
import random
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from .vqa import ImageRef, TaskKind, script_key

DEFAULT_BUFFER_CAPACITY = 10_000
DEFAULT_CORRECTION_RATIO = 0.30
DEFAULT_BATCH_SIZE = 32

# Carried and logged with every training job; the mock trainer does not
# interpret these beyond recording them.
DEFAULT_HYPERPARAMS = {
    "learning_rate": 5e-5,
    "weight_decay": 0.01,
    "warmup_ratio": 0.03,
    "lr_scheduler": "cosine",
    "per_device_train_batch_size": 4,
    "gradient_accumulation_steps": 8,
    "num_train_epochs": 3,
    "max_grad_norm": 1.0,
    "label_smoothing": 0.1,
    "bf16": True,
}

DEFAULT_TASK_WEIGHTS = {
    TaskKind.PLATE_RECOGNITION: 1.0,
    TaskKind.STATE_CLASSIFICATION: 0.5,
    TaskKind.MAKE_MODEL: 0.3,
    TaskKind.COLOR_DESCRIPTION: 0.2,
}


class BothPoolsEmpty(Exception):
    pass


class MissingWeight(Exception):
    pass


class TrainerFailure(Exception):
    pass


@dataclass(frozen=True)
class ReplayExample:
    image: ImageRef
    task: TaskKind
    target: str
    source: str = "original"  # "original" | "correction"
    inserted_at: float = 0.0

    def __post_init__(self):
        if not self.target:
            raise ValueError("target must be non-empty")
        if self.source not in ("original", "correction"):
            raise ValueError(f"unknown source {self.source!r}")

    def to_dict(self) -> dict:
        return {
            "image": self.image.to_dict(),
            "task": self.task.value,
            "target": self.target,
            "source": self.source,
            "inserted_at": self.inserted_at,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ReplayExample":
        return cls(
            image=ImageRef.from_dict(d["image"]),
            task=TaskKind(d["task"]),
            target=d["target"],
            source=d.get("source", "original"),
            inserted_at=float(d.get("inserted_at", 0.0)),
        )


class ReplayBuffer:
    """Bounded FIFO of training examples; oldest entries evict first."""

    def __init__(self, capacity: int = DEFAULT_BUFFER_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: list[ReplayExample] = []
        self._lock = threading.Lock()

    def push(self, example: ReplayExample) -> None:
        with self._lock:
            self._entries.append(example)
            if len(self._entries) > self.capacity:
                del self._entries[: len(self._entries) - self.capacity]

    def extend(self, examples: Sequence[ReplayExample]) -> None:
        for ex in examples:
            self.push(ex)

    def snapshot(self) -> list[ReplayExample]:
        with self._lock:
            return list(self._entries)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def save(self, path: str | Path) -> None:
        """Persist as JSON-lines: a capacity header then one entry per line."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            lines = [json.dumps({"capacity": self.capacity})]
            lines += [json.dumps(e.to_dict(), sort_keys=True) for e in self._entries]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ReplayBuffer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        header = json.loads(lines[0])
        buf = cls(capacity=int(header["capacity"]))
        for line in lines[1:]:
            if line.strip():
                buf.push(ReplayExample.from_dict(json.loads(line)))
        return buf


def push_replay(buffer: ReplayBuffer, example: ReplayExample) -> ReplayBuffer:
    buffer.push(example)
    return buffer


@dataclass(frozen=True)
class MixConfig:
    correction_ratio: float = DEFAULT_CORRECTION_RATIO
    batch_size: int = DEFAULT_BATCH_SIZE

    def __post_init__(self):
        if not 0.0 <= self.correction_ratio <= 1.0:
            raise ValueError("correction_ratio must be in [0,1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def replay_share(self) -> float:
        return 1.0 - self.correction_ratio

    def correction_slots(self) -> int:
        # Round half up: a 0.30 ratio at batch 32 must yield 10 slots.
        return int(math.floor(self.correction_ratio * self.batch_size + 0.5))


@dataclass
class TrainingBatch:
    corrections: list[ReplayExample]
    replay: list[ReplayExample]
    deficit_filled: bool = False  # one pool ran short; the other covered it

    @property
    def examples(self) -> list[ReplayExample]:
        return self.corrections + self.replay


def compose_batch(
    buffer: ReplayBuffer | Sequence[ReplayExample],
    corrections_pool: Sequence[ReplayExample],
    mix: MixConfig = MixConfig(),
    rng_seed: int = 0,
) -> TrainingBatch:
    """Draw one training batch at the configured correction/replay mix.

    Slot counts are exact (round-half-up on ratio * batch size); sampling is
    uniform without replacement within each pool. A pool smaller than its
    slot count is topped up from the other pool and the batch flagged.
    """
    replay_pool = buffer.snapshot() if isinstance(buffer, ReplayBuffer) else list(buffer)
    corr_pool = list(corrections_pool)
    if not replay_pool and not corr_pool:
        raise BothPoolsEmpty("no replay entries and no corrections to sample")

    # String seeding hashes the seed; sequential integer seeds would give
    # correlated first draws across batches.
    rng = random.Random(f"compose:{rng_seed}")
    corr_slots = mix.correction_slots()
    replay_slots = mix.batch_size - corr_slots

    take_corr = min(corr_slots, len(corr_pool))
    take_replay = min(replay_slots, len(replay_pool))
    deficit = (corr_slots - take_corr) + (replay_slots - take_replay)
    corrections = rng.sample(corr_pool, take_corr)
    replay = rng.sample(replay_pool, take_replay)

    deficit_filled = False
    if deficit > 0:
        # Top up from whichever pool still has unsampled entries.
        remaining_replay = [e for e in replay_pool if e not in replay]
        remaining_corr = [e for e in corr_pool if e not in corrections]
        extra_replay = rng.sample(remaining_replay, min(deficit, len(remaining_replay)))
        replay += extra_replay
        deficit -= len(extra_replay)
        if deficit > 0:
            extra_corr = rng.sample(remaining_corr, min(deficit, len(remaining_corr)))
            corrections += extra_corr
        deficit_filled = True
    return TrainingBatch(corrections=corrections, replay=replay, deficit_filled=deficit_filled)


def weighted_loss(
    per_task_losses: Mapping[TaskKind, float],
    weights: Mapping[TaskKind, float] = DEFAULT_TASK_WEIGHTS,
) -> float:
    """Sum of task losses scaled by their importance weights."""
    total = 0.0
    for task, loss in per_task_losses.items():
        if loss < 0:
            raise ValueError(f"loss for {task.value} is negative")
        if task not in weights:
            raise MissingWeight(f"no weight configured for task {task.value}")
        total += weights[task] * loss
    return total


def lora_param_count(layers: int, modules_per_layer: int, hidden_dim: int, rank: int) -> int:
    """Trainable parameters of a low-rank adapter over the target modules.

    Each adapted module adds two rank-r matrices of hidden_dim rows/columns.
    """
    for name, v in (("layers", layers), ("modules_per_layer", modules_per_layer),
                    ("hidden_dim", hidden_dim)):
        if v <= 0:
            raise ValueError(f"{name} must be positive")
    if rank < 0:
        raise ValueError("rank must be non-negative")
    return layers * modules_per_layer * 2 * hidden_dim * rank


@dataclass
class CandidateModel:
    """Immutable training output awaiting gate evaluation and publication."""

    version: int
    script: dict
    hyperparams: dict
    consumed_correction_ids: tuple[str, ...] = ()
    forgotten_keys: tuple[str, ...] = ()


class TrainerBackend(Protocol):
    def train(self, batches: Sequence[TrainingBatch], hyperparams: Mapping) -> CandidateModel: ...


@dataclass(frozen=True)
class ForgettingConfig:
    """Shape of the mock trainer's forgetting law.

    Pre-existing script entries are dropped with probability
    f = f_max * max(0, 1 - replay_share / reference_share): zero at or
    above the reference replay share, rising to f_max with no replay.
    """

    f_max: float = 0.25
    reference_share: float = 0.70

    def forget_probability(self, replay_share: float) -> float:
        return self.f_max * max(0.0, 1.0 - replay_share / self.reference_share)


LEARNED_TOKEN_PROBS = (0.99, 0.99, 0.99)


class MockTrainer:
    """Deterministic trainer that patches a copy of the scripted backend.

    Every correction in the job is written into the new script with
    high-confidence token probabilities. Pre-existing entries are dropped
    with a probability given by the forgetting law, which is parametric in
    the replay share: it stands in for the rehearsal effect of the replay
    batches, so runs with little or no replay visibly damage prior
    knowledge while replay-heavy runs keep it. Replayed examples therefore
    do not rewrite script entries themselves; batches feed the composition
    audit trail only.
    """

    def __init__(
        self,
        base_script: Mapping[str, Mapping],
        version: int,
        replay_share: float,
        forgetting: ForgettingConfig = ForgettingConfig(),
        seed: int = 0,
        corrections: Sequence[ReplayExample] = (),
        fail: bool = False,
    ):
        self.base_script = dict(base_script)
        self.version = version
        self.replay_share = replay_share
        self.forgetting = forgetting
        self.seed = seed
        self.corrections = list(corrections)
        self.fail = fail

    def train(self, batches: Sequence[TrainingBatch], hyperparams: Mapping) -> CandidateModel:
        if self.fail:
            raise TrainerFailure("injected trainer failure")
        rng = random.Random(f"trainer:{self.seed}")
        script = dict(self.base_script)
        f = self.forgetting.forget_probability(self.replay_share)
        forgotten = []
        for key in sorted(self.base_script):
            if f > 0.0 and rng.random() < f:
                script.pop(key, None)
                forgotten.append(key)

        for ex in self.corrections:
            script[script_key(ex.image.digest, ex.task)] = {
                "text": ex.target,
                "token_probs": list(LEARNED_TOKEN_PROBS),
            }
        return CandidateModel(
            version=self.version,
            script=script,
            hyperparams=dict(hyperparams),
            forgotten_keys=tuple(forgotten),
        )


def run_update(
    corrections: Sequence[ReplayExample],
    buffer: ReplayBuffer,
    mix: MixConfig,
    weights: Mapping[TaskKind, float],
    trainer: TrainerBackend,
    steps: int,
    hyperparams: Mapping | None = None,
    rng_seed: int = 0,
    correction_ids: Sequence[str] = (),
    now: float = 0.0,
) -> CandidateModel:
    """Compose `steps` batches, train, then fold corrections into the buffer.

    On trainer failure nothing is mutated: the buffer is untouched and the
    caller's pending corrections stay pending.
    """
    hp = dict(DEFAULT_HYPERPARAMS if hyperparams is None else hyperparams)
    batches = [
        compose_batch(buffer, corrections, mix, rng_seed=rng_seed + step)
        for step in range(steps)
    ]
    candidate = trainer.train(batches, hp)  # may raise TrainerFailure
    if correction_ids:
        candidate.consumed_correction_ids = tuple(correction_ids)
    buffer.extend(
        ReplayExample(
            image=ex.image,
            task=ex.task,
            target=ex.target,
            source="correction",
            inserted_at=now,
        )
        for ex in corrections
    )
    return candidate
