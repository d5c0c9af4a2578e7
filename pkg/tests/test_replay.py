from __future__ import annotations

import math
import random

import pytest

from sentinel.replay import (
    BothPoolsEmpty,
    CandidateModel,
    ForgettingConfig,
    MissingWeight,
    MixConfig,
    MockTrainer,
    ReplayBuffer,
    ReplayExample,
    TrainerFailure,
    compose_batch,
    lora_param_count,
    push_replay,
    run_update,
    weighted_loss,
)
from sentinel.vqa import TaskKind, script_key

from conftest import make_image


def _example(tag: str, target: str = "ABC1234", source: str = "original") -> ReplayExample:
    return ReplayExample(
        image=make_image(tag),
        task=TaskKind.PLATE_RECOGNITION,
        target=target,
        source=source,
        inserted_at=float(len(tag)),
    )


class TestReplayBuffer:
    def test_fifo_eviction(self):
        buf = ReplayBuffer(capacity=2)
        for tag in ("a", "b", "c"):
            push_replay(buf, _example(tag))
        entries = buf.snapshot()
        assert [e.image.id for e in entries] == ["b", "c"]

    def test_push_into_empty(self):
        buf = ReplayBuffer(capacity=10)
        push_replay(buf, _example("a"))
        assert len(buf) == 1

    def test_capacity_10000(self):
        buf = ReplayBuffer(capacity=10_000)
        first = _example("victim")
        push_replay(buf, first)
        for i in range(10_000):
            push_replay(buf, _example(f"e{i}"))
        ids = {e.image.id for e in buf.snapshot()}
        assert "victim" not in ids
        assert len(buf) == 10_000

    def test_eviction_order_equals_insertion_order(self):
        buf = ReplayBuffer(capacity=5)
        for i in range(17):
            push_replay(buf, _example(f"e{i:03d}"))
        assert [e.image.id for e in buf.snapshot()] == [f"e{i:03d}" for i in range(12, 17)]

    def test_persistence_round_trip(self, tmp_path):
        buf = ReplayBuffer(capacity=7)
        for i in range(5):
            push_replay(buf, _example(f"e{i}", source="correction" if i % 2 else "original"))
        path = tmp_path / "buffer.jsonl"
        buf.save(path)
        loaded = ReplayBuffer.load(path)
        assert loaded.capacity == 7
        assert loaded.snapshot() == buf.snapshot()


class TestComposeBatch:
    def _pools(self, n_replay: int, n_corr: int):
        replay = [_example(f"r{i}") for i in range(n_replay)]
        corr = [_example(f"c{i}", source="correction") for i in range(n_corr)]
        return replay, corr

    def test_slot_arithmetic_32(self):
        replay, corr = self._pools(100, 100)
        batch = compose_batch(replay, corr, MixConfig(0.30, 32), rng_seed=1)
        assert len(batch.corrections) == 10
        assert len(batch.replay) == 22
        assert not batch.deficit_filled

    def test_slot_arithmetic_10(self):
        replay, corr = self._pools(50, 50)
        batch = compose_batch(replay, corr, MixConfig(0.30, 10), rng_seed=1)
        assert len(batch.corrections) == 3
        assert len(batch.replay) == 7

    def test_lambda_zero(self):
        replay, corr = self._pools(50, 0)
        batch = compose_batch(replay, corr, MixConfig(0.0, 32), rng_seed=1)
        assert len(batch.corrections) == 0
        assert len(batch.replay) == 32

    def test_lambda_one(self):
        replay, corr = self._pools(0, 50)
        batch = compose_batch(replay, corr, MixConfig(1.0, 32), rng_seed=1)
        assert len(batch.corrections) == 32
        assert len(batch.replay) == 0

    def test_round_half_up(self):
        assert MixConfig(0.30, 32).correction_slots() == 10  # 9.6 rounds up
        assert MixConfig(0.30, 10).correction_slots() == 3
        assert MixConfig(0.25, 2).correction_slots() == 1  # 0.5 rounds up
        assert MixConfig(0.50, 32).correction_slots() == 16

    def test_deficit_filled_from_other_pool(self):
        replay, corr = self._pools(100, 4)
        batch = compose_batch(replay, corr, MixConfig(0.30, 32), rng_seed=1)
        assert batch.deficit_filled
        assert len(batch.corrections) == 4
        assert len(batch.replay) == 28

    def test_both_pools_empty(self):
        with pytest.raises(BothPoolsEmpty):
            compose_batch([], [], MixConfig(0.30, 32), rng_seed=1)

    def test_sampling_without_replacement(self):
        replay, corr = self._pools(30, 15)
        batch = compose_batch(replay, corr, MixConfig(0.30, 32), rng_seed=5)
        ids = [e.image.id for e in batch.examples]
        assert len(ids) == len(set(ids))

    def test_deterministic_under_seed(self):
        replay, corr = self._pools(64, 64)
        a = compose_batch(replay, corr, MixConfig(0.30, 32), rng_seed=99)
        b = compose_batch(replay, corr, MixConfig(0.30, 32), rng_seed=99)
        assert [e.image.id for e in a.examples] == [e.image.id for e in b.examples]

    def test_uniform_sampling_per_entry_3sigma(self):
        replay = [_example(f"r{i}") for i in range(64)]
        corr = [_example(f"c{i}", source="correction") for i in range(16)]
        mix = MixConfig(0.30, 32)
        draws_per_batch = mix.batch_size - mix.correction_slots()
        n_batches = 2000
        counts = {e.image.id: 0 for e in replay}
        for i in range(n_batches):
            batch = compose_batch(replay, corr, mix, rng_seed=i)
            for e in batch.replay:
                counts[e.image.id] += 1
        p = draws_per_batch / len(replay)
        expected = n_batches * p
        sigma = math.sqrt(n_batches * p * (1 - p))
        for entry, count in counts.items():
            assert abs(count - expected) <= 3 * sigma, entry


class TestWeightedLoss:
    def test_default_weights_sum(self):
        losses = {
            TaskKind.PLATE_RECOGNITION: 1.0,
            TaskKind.STATE_CLASSIFICATION: 1.0,
            TaskKind.MAKE_MODEL: 1.0,
            TaskKind.COLOR_DESCRIPTION: 1.0,
        }
        assert weighted_loss(losses) == pytest.approx(2.0)

    def test_zero_losses(self):
        losses = {TaskKind.PLATE_RECOGNITION: 0.0, TaskKind.STATE_CLASSIFICATION: 0.0}
        assert weighted_loss(losses) == 0.0

    def test_single_term(self):
        assert weighted_loss({TaskKind.PLATE_RECOGNITION: 2.0}) == pytest.approx(2.0)

    def test_missing_weight(self):
        with pytest.raises(MissingWeight):
            weighted_loss({TaskKind.SEATBELT_DETECTION: 1.0})

    def test_linearity(self):
        rng = random.Random(4)
        for _ in range(100):
            l1 = rng.uniform(0, 5)
            l2 = rng.uniform(0, 5)
            a = weighted_loss({TaskKind.PLATE_RECOGNITION: l1})
            b = weighted_loss({TaskKind.PLATE_RECOGNITION: l2})
            both = weighted_loss({TaskKind.PLATE_RECOGNITION: l1 + l2})
            assert both == pytest.approx(a + b)


class TestLoraParamCount:
    def test_18_layer_adapter(self):
        assert lora_param_count(18, 7, 2048, 16) == 8_257_536

    def test_32_layer_adapter(self):
        assert lora_param_count(32, 7, 2048, 16) == 14_680_064

    def test_rank_zero(self):
        assert lora_param_count(18, 7, 2048, 0) == 0

    def test_multiplicative_in_rank(self):
        rng = random.Random(6)
        for _ in range(50):
            layers = rng.randint(1, 64)
            modules = rng.randint(1, 8)
            dim = rng.randint(64, 4096)
            rank = rng.randint(1, 64)
            assert lora_param_count(layers, modules, dim, 2 * rank) == 2 * lora_param_count(
                layers, modules, dim, rank
            )

    def test_rejects_nonpositive_dims(self):
        with pytest.raises(ValueError):
            lora_param_count(0, 7, 2048, 16)


class TestMockTrainerAndRunUpdate:
    def _script(self, n: int) -> dict:
        return {
            script_key(make_image(f"orig{i}").digest, TaskKind.PLATE_RECOGNITION): {
                "text": f"ORI{i:04d}",
                "token_probs": [0.99],
            }
            for i in range(n)
        }

    def test_corrections_all_learned(self):
        script = self._script(50)
        corrections = [_example(f"c{i}", target=f"FIX{i:04d}", source="correction") for i in range(30)]
        buffer = ReplayBuffer(capacity=100)
        for i in range(60):
            push_replay(buffer, _example(f"orig{i}", target=f"ORI{i:04d}"))
        trainer = MockTrainer(
            script, version=2, replay_share=0.7, seed=1, corrections=corrections
        )
        candidate = run_update(
            corrections, buffer, MixConfig(0.30, 32), {}, trainer, steps=4
        )
        assert isinstance(candidate, CandidateModel)
        for ex in corrections:
            key = script_key(ex.image.digest, ex.task)
            assert candidate.script[key]["text"] == ex.target

    def test_no_forgetting_at_reference_replay_share(self):
        script = self._script(200)
        trainer = MockTrainer(script, version=2, replay_share=0.70, seed=3)
        candidate = trainer.train([], {})
        assert candidate.forgotten_keys == ()
        assert set(script) <= set(candidate.script)

    def test_full_forgetting_pressure_without_replay(self):
        script = self._script(2000)
        trainer = MockTrainer(script, version=2, replay_share=0.0, seed=3)
        candidate = trainer.train([], {})
        frac = len(candidate.forgotten_keys) / len(script)
        assert frac == pytest.approx(0.25, abs=0.03)

    def test_forgetting_law_shape(self):
        cfg = ForgettingConfig(f_max=0.25, reference_share=0.70)
        assert cfg.forget_probability(0.0) == pytest.approx(0.25)
        assert cfg.forget_probability(0.70) == 0.0
        assert cfg.forget_probability(0.90) == 0.0
        assert 0.0 < cfg.forget_probability(0.35) < 0.25

    def test_forgetting_deterministic_under_seed(self):
        script = self._script(300)
        a = MockTrainer(script, 2, replay_share=0.0, seed=42).train([], {})
        b = MockTrainer(script, 2, replay_share=0.0, seed=42).train([], {})
        assert a.forgotten_keys == b.forgotten_keys

    def test_trainer_failure_leaves_buffer_untouched(self):
        corrections = [_example("c0", source="correction")]
        buffer = ReplayBuffer(capacity=10)
        push_replay(buffer, _example("orig0"))
        trainer = MockTrainer({}, version=2, replay_share=0.7, fail=True)
        before = buffer.snapshot()
        with pytest.raises(TrainerFailure):
            run_update(corrections, buffer, MixConfig(0.30, 2), {}, trainer, steps=1)
        assert buffer.snapshot() == before

    def test_corrections_fold_into_buffer_after_training(self):
        corrections = [_example(f"c{i}", source="correction") for i in range(3)]
        buffer = ReplayBuffer(capacity=10)
        push_replay(buffer, _example("orig0"))
        trainer = MockTrainer({}, version=2, replay_share=0.7, corrections=corrections)
        run_update(corrections, buffer, MixConfig(0.30, 2), {}, trainer, steps=1, now=5.0)
        entries = buffer.snapshot()
        assert len(entries) == 4
        folded = [e for e in entries if e.source == "correction"]
        assert len(folded) == 3
        assert all(e.inserted_at == 5.0 for e in folded)
