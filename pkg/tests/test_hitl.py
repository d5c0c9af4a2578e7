from __future__ import annotations

import pytest

from sentinel.hitl import (
    AccuracyWindow,
    CorrectionLog,
    CorrectionRecord,
    CorrectionStatus,
    EmptyWindow,
    QualityConfig,
    TrainReason,
    TriggerConfig,
    TriggerState,
    rolling_accuracy,
    should_train,
)
from sentinel.parsing import PlateFormatRule
from sentinel.vqa import TaskKind

from conftest import make_image

TEXAS_RULE = PlateFormatRule(name="Texas", pattern="LLLDDDD", min_len=7, max_len=7)
HOUR = 3600.0


def _record(tag: str, corrected: str, quality: float = 0.9, task=TaskKind.PLATE_RECOGNITION):
    return CorrectionRecord(
        id=f"corr-{tag}-{corrected}",
        image=make_image(tag, quality=quality),
        task=task,
        original_value="WRONG1",
        corrected_value=corrected,
        operator_id="op-1",
        created_at=1000.0,
    )


class TestIngest:
    def test_accepted(self, tmp_path):
        log = CorrectionLog(tmp_path / "corr.jsonl")
        result = log.ingest(_record("a", "ABC1234"), format_rules=[TEXAS_RULE])
        assert result.status is CorrectionStatus.ACCEPTED
        assert log.pending_count() == 1

    def test_quality_gate(self, tmp_path):
        log = CorrectionLog(tmp_path / "corr.jsonl")
        result = log.ingest(_record("a", "ABC1234", quality=0.1), format_rules=[TEXAS_RULE])
        assert result.status is CorrectionStatus.REJECTED
        assert result.reason == "quality_below_threshold"
        assert log.pending_count() == 0

    def test_duplicate_rejected(self, tmp_path):
        log = CorrectionLog(tmp_path / "corr.jsonl")
        log.ingest(_record("a", "ABC1234"), format_rules=[TEXAS_RULE])
        result = log.ingest(_record("a", "ABC1234"), format_rules=[TEXAS_RULE])
        assert result.status is CorrectionStatus.REJECTED
        assert result.reason == "duplicate"
        assert log.pending_count() == 1

    def test_recorrection_is_not_a_duplicate(self, tmp_path):
        # the operator fixing a bad correction changes corrected_value
        log = CorrectionLog(tmp_path / "corr.jsonl")
        log.ingest(_record("a", "ABC1234"), format_rules=[TEXAS_RULE])
        result = log.ingest(_record("a", "ABC1235"), format_rules=[TEXAS_RULE])
        assert result.status is CorrectionStatus.ACCEPTED
        assert log.pending_count() == 2

    def test_malformed_plate_goes_to_secondary_review(self, tmp_path):
        log = CorrectionLog(tmp_path / "corr.jsonl")
        result = log.ingest(_record("a", "A@#1"), format_rules=[TEXAS_RULE])
        assert result.status is CorrectionStatus.SECONDARY_REVIEW
        assert log.pending_count() == 0
        assert len(log.secondary_review()) == 1

    def test_format_gate_only_for_plate_task(self, tmp_path):
        log = CorrectionLog(tmp_path / "corr.jsonl")
        result = log.ingest(
            _record("a", "Texas!", task=TaskKind.STATE_CLASSIFICATION),
            format_rules=[TEXAS_RULE],
        )
        assert result.status is CorrectionStatus.ACCEPTED

    def test_quality_threshold_configurable(self, tmp_path):
        log = CorrectionLog(tmp_path / "corr.jsonl")
        result = log.ingest(
            _record("a", "ABC1234", quality=0.4),
            quality=QualityConfig(min_quality_score=0.5),
            format_rules=[TEXAS_RULE],
        )
        assert result.status is CorrectionStatus.REJECTED

    def test_corrected_must_differ(self):
        with pytest.raises(ValueError):
            CorrectionRecord(
                id="x",
                image=make_image("a"),
                task=TaskKind.PLATE_RECOGNITION,
                original_value="SAME123",
                corrected_value="SAME123",
                operator_id="op",
                created_at=0.0,
            )


class TestDurability:
    def test_pending_survives_restart(self, tmp_path):
        path = tmp_path / "corr.jsonl"
        log = CorrectionLog(path)
        for i in range(5):
            log.ingest(_record(f"img{i}", "ABC1234"), format_rules=[TEXAS_RULE])
        log.ingest(_record("bad", "ABC1234", quality=0.1), format_rules=[TEXAS_RULE])

        reopened = CorrectionLog(path)
        assert reopened.pending_count() == 5
        assert {r.image.digest for r in reopened.pending()} == {
            r.image.digest for r in log.pending()
        }

    def test_dedupe_survives_restart(self, tmp_path):
        path = tmp_path / "corr.jsonl"
        CorrectionLog(path).ingest(_record("a", "ABC1234"), format_rules=[TEXAS_RULE])
        reopened = CorrectionLog(path)
        result = reopened.ingest(_record("a", "ABC1234"), format_rules=[TEXAS_RULE])
        assert result.status is CorrectionStatus.REJECTED

    def test_consumption_survives_restart(self, tmp_path):
        path = tmp_path / "corr.jsonl"
        log = CorrectionLog(path)
        for i in range(4):
            log.ingest(_record(f"img{i}", "ABC1234"), format_rules=[TEXAS_RULE])
        consumed = [r.id for r in log.pending()[:3]]
        log.mark_consumed(consumed)
        assert log.pending_count() == 1
        assert CorrectionLog(path).pending_count() == 1


class TestRollingAccuracy:
    def test_counting(self):
        window = AccuracyWindow(window_size=500)
        for _ in range(90):
            window.add(AccuracyWindow.CONFIRMED)
        for _ in range(10):
            window.add(AccuracyWindow.CORRECTED)
        assert rolling_accuracy(window) == pytest.approx(0.90)

    def test_all_confirmed(self):
        window = AccuracyWindow()
        window.add(AccuracyWindow.CONFIRMED)
        assert rolling_accuracy(window) == 1.0

    def test_all_corrected(self):
        window = AccuracyWindow()
        window.add(AccuracyWindow.CORRECTED)
        assert rolling_accuracy(window) == 0.0

    def test_ring_evicts_oldest(self):
        window = AccuracyWindow(window_size=3)
        window.add(AccuracyWindow.CORRECTED)
        for _ in range(3):
            window.add(AccuracyWindow.CONFIRMED)
        assert rolling_accuracy(window) == 1.0
        assert len(window) == 3

    def test_empty(self):
        with pytest.raises(EmptyWindow):
            rolling_accuracy(AccuracyWindow())


class TestShouldTrain:
    CONFIG = TriggerConfig()

    def test_buffer_full(self):
        state = TriggerState(pending_count=500, oldest_pending_at=0.0)
        assert should_train(state, self.CONFIG, now=0.0) is TrainReason.BUFFER_FULL

    def test_time_elapsed(self):
        state = TriggerState(pending_count=50, oldest_pending_at=0.0)
        assert should_train(state, self.CONFIG, now=5 * HOUR) is TrainReason.TIME_ELAPSED

    def test_below_minimum(self):
        state = TriggerState(pending_count=49, oldest_pending_at=0.0)
        assert should_train(state, self.CONFIG, now=100 * HOUR) is None

    def test_accuracy_drop(self):
        state = TriggerState(
            pending_count=3,
            oldest_pending_at=0.0,
            baseline_accuracy=0.92,
            current_accuracy=0.85,
        )
        assert should_train(state, self.CONFIG, now=0.0) is TrainReason.ACCURACY_DROP

    def test_boundary_truth_table(self):
        cases = [
            # (pending, elapsed_hours, baseline, current, expected)
            (49, 0.0, None, None, None),
            (50, 3.99, None, None, None),
            (50, 4.0, None, None, TrainReason.TIME_ELAPSED),
            (499, 0.0, None, None, None),
            (499, 4.0, None, None, TrainReason.TIME_ELAPSED),
            (500, 0.0, None, None, TrainReason.BUFFER_FULL),
            (500, 4.0, None, None, TrainReason.BUFFER_FULL),
            # drop values paired with 0.0 so the float difference is exact
            (1, 0.0, 0.05, 0.0, None),  # drop exactly 0.05: comparison is strict
            (1, 0.0, 0.0501, 0.0, TrainReason.ACCURACY_DROP),
            (0, 0.0, 0.90, 0.80, None),  # no pending corrections
        ]
        for pending, hours, baseline, current, expected in cases:
            state = TriggerState(
                pending_count=pending,
                oldest_pending_at=0.0 if pending else None,
                baseline_accuracy=baseline,
                current_accuracy=current,
            )
            got = should_train(state, self.CONFIG, now=hours * HOUR)
            assert got is expected, (pending, hours, baseline, current, got)

    def test_precedence_buffer_over_time_over_drop(self):
        state = TriggerState(
            pending_count=500,
            oldest_pending_at=0.0,
            baseline_accuracy=0.95,
            current_accuracy=0.50,
        )
        assert should_train(state, self.CONFIG, now=100 * HOUR) is TrainReason.BUFFER_FULL
        state = TriggerState(
            pending_count=50,
            oldest_pending_at=0.0,
            baseline_accuracy=0.95,
            current_accuracy=0.50,
        )
        assert should_train(state, self.CONFIG, now=100 * HOUR) is TrainReason.TIME_ELAPSED

    def test_pure_function(self):
        state = TriggerState(pending_count=500, oldest_pending_at=0.0)
        for _ in range(5):
            assert should_train(state, self.CONFIG, now=0.0) is TrainReason.BUFFER_FULL

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TriggerConfig(min_corrections=0)
        with pytest.raises(ValueError):
            TriggerConfig(min_corrections=600, max_corrections=500)
