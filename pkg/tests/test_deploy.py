from __future__ import annotations

import math

import pytest

from sentinel.deploy import (
    GateDecision,
    GateNotPassed,
    IncompleteArtifact,
    InsufficientSamples,
    LengthMismatch,
    ModelState,
    NoPreviousVersion,
    Registry,
    RejectCause,
    evaluate_gate,
    paired_t_test,
    regularized_incomplete_beta,
    t_survival,
)

# One-sided P(T >= t) reference values, precomputed with an independent
# statistical library and frozen here.
T_SF_REFERENCE = [
    (0.0, 1, 0.5),
    (0.5, 2, 0.33333333333333337),
    (1.0, 3, 0.19550110947788527),
    (1.5, 4, 0.10399999999999991),
    (2.0, 5, 0.05096973941492914),
    (2.5, 6, 0.02326411614208364),
    (3.0, 7, 0.009971063065996261),
    (0.25, 8, 0.40444372274676754),
    (2.0, 9, 0.03827641188535047),
    (1.25, 10, 0.11988030512766777),
    (4.0, 12, 0.0008808481221975126),
    (0.75, 15, 0.23242833665085405),
    (2.262, 9, 0.025006422751227275),
    (-1.0, 5, 0.8183912661754387),
    (-2.5, 11, 0.985246812956318),
    (5.0, 30, 1.1648342733503893e-05),
    (1.96, 100, 0.026389450683114827),
    (3.138, 4, 0.01745746763953539),
    (0.1, 49, 0.46037617629255173),
    (2.0, 2, 0.09175170953613696),
]


class TestTDistribution:
    def test_against_reference_oracle(self):
        for t, df, expected in T_SF_REFERENCE:
            assert t_survival(t, df) == pytest.approx(expected, abs=1e-3), (t, df)

    def test_tight_agreement(self):
        for t, df, expected in T_SF_REFERENCE:
            assert t_survival(t, df) == pytest.approx(expected, rel=1e-9), (t, df)

    def test_monotone_decreasing_in_t(self):
        for df in (1, 2, 5, 9, 30, 100):
            grid = [t_survival(-4 + 0.25 * i, df) for i in range(33)]
            for a, b in zip(grid, grid[1:]):
                assert b <= a + 1e-15

    def test_symmetry(self):
        for df in (3, 9, 25):
            for t in (0.3, 1.1, 2.7):
                assert t_survival(t, df) + t_survival(-t, df) == pytest.approx(1.0)

    def test_incomplete_beta_bounds(self):
        assert regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0
        assert regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0
        # I_x(1,1) is the identity
        for x in (0.1, 0.5, 0.9):
            assert regularized_incomplete_beta(1.0, 1.0, x) == pytest.approx(x)


class TestPairedTTest:
    def test_all_zero_deltas(self):
        t, p = paired_t_test([0.0, 0.0, 0.0])
        assert p == 1.0

    def test_worked_example(self):
        t, p = paired_t_test([0.02, 0.01, 0.03, 0.00, 0.02])
        assert t == pytest.approx(3.138, abs=1e-3)
        assert p == pytest.approx(0.0175, abs=1e-3)

    def test_constant_positive_deltas(self):
        t, p = paired_t_test([0.5, 0.5])
        assert p == 0.0
        assert math.isinf(t)

    def test_constant_negative_deltas(self):
        _, p = paired_t_test([-0.5, -0.5])
        assert p == 1.0

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientSamples):
            paired_t_test([0.1])


class TestEvaluateGate:
    def test_deploy(self):
        prod = [0.0] * 40
        cand = [1.0] * 30 + [0.0] * 10
        report = evaluate_gate(prod, cand, prod_heldout_acc=0.90, cand_heldout_acc=0.89)
        assert report.decision is GateDecision.DEPLOY
        assert report.p_value < 0.05
        assert report.forgetting_drop == pytest.approx(0.01)

    def test_reject_not_significant(self):
        prod = [0.0, 1.0] * 20
        cand = [1.0, 0.0] * 20  # no net improvement
        report = evaluate_gate(prod, cand, 0.9, 0.9)
        assert report.decision is GateDecision.REJECT
        assert report.reject_cause is RejectCause.NOT_SIGNIFICANT

    def test_reject_forgetting(self):
        prod = [0.0] * 40
        cand = [1.0] * 40
        report = evaluate_gate(prod, cand, prod_heldout_acc=0.90, cand_heldout_acc=0.87)
        assert report.decision is GateDecision.REJECT
        assert report.reject_cause is RejectCause.FORGETTING
        assert report.forgetting_drop == pytest.approx(0.03)

    def test_forgetting_boundary_inclusive(self):
        prod = [0.0] * 40
        cand = [1.0] * 40
        # accuracies paired with 0.0 so the drop is exactly the float 0.02
        report = evaluate_gate(prod, cand, 0.02, 0.0)
        assert report.decision is GateDecision.DEPLOY

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            evaluate_gate([1.0], [1.0, 0.0], 0.9, 0.9)

    def test_deterministic(self):
        prod = [0.0, 1.0, 0.0, 1.0, 0.0]
        cand = [1.0, 1.0, 1.0, 1.0, 0.0]
        a = evaluate_gate(prod, cand, 0.9, 0.89)
        b = evaluate_gate(prod, cand, 0.9, 0.89)
        assert a == b

    def test_round_trip_serialization(self):
        from sentinel.deploy import GateReport

        report = evaluate_gate([0.0] * 5, [1.0] * 5, 0.9, 0.9)
        again = GateReport.from_dict(report.to_dict())
        assert again.decision is report.decision
        assert again.p_value == report.p_value


def _publish(registry: Registry, gate=None):
    return registry.publish({"script.json": {}}, gate_report=gate)


def _deploy_report():
    return evaluate_gate([0.0] * 10, [1.0] * 10, 0.9, 0.9)


def _reject_report():
    return evaluate_gate([1.0] * 10, [1.0] * 10, 0.9, 0.9)


class TestRegistry:
    def test_publish_sequence(self, tmp_path):
        registry = Registry(tmp_path)
        v1 = _publish(registry)
        v2 = _publish(registry)
        assert (v1.version, v2.version) == (1, 2)
        assert (tmp_path / "v1" / "COMPLETE").exists()
        assert v1.state is ModelState.STAGED

    def test_activate_and_previous(self, tmp_path):
        registry = Registry(tmp_path)
        v1 = _publish(registry)
        registry.activate(v1.version, require_gate=False)
        v2 = _publish(registry, gate=_deploy_report())
        registry.activate(v2.version)
        assert registry.current_version() == 2
        assert registry.previous_version() == 1
        states = {m.version: m.state for m in registry.listing()}
        assert states[2] is ModelState.ACTIVE
        assert states[1] is ModelState.PREVIOUS

    def test_activate_requires_gate_pass(self, tmp_path):
        registry = Registry(tmp_path)
        v1 = _publish(registry)
        registry.activate(v1.version, require_gate=False)
        v2 = _publish(registry, gate=_reject_report())
        with pytest.raises(GateNotPassed):
            registry.activate(v2.version)
        v3 = _publish(registry)  # no gate report at all
        with pytest.raises(GateNotPassed):
            registry.activate(v3.version)

    def test_activate_requires_marker(self, tmp_path):
        registry = Registry(tmp_path)
        v1 = _publish(registry)
        registry.activate(v1.version, require_gate=False)
        (tmp_path / "v9").mkdir()
        with pytest.raises(IncompleteArtifact):
            registry.activate(9)

    def test_torn_publish_invisible(self, tmp_path):
        registry = Registry(tmp_path)
        _publish(registry)
        torn = tmp_path / "v2"
        torn.mkdir()
        (torn / "script.json").write_text("{}", encoding="utf-8")
        versions = [m.version for m in registry.listing()]
        assert versions == [1]
        # next publish allocates past the torn directory
        v3 = _publish(registry)
        assert v3.version == 3

    def test_rollback_swap_and_involution(self, tmp_path):
        registry = Registry(tmp_path)
        v1 = _publish(registry)
        registry.activate(v1.version, require_gate=False)
        v2 = _publish(registry, gate=_deploy_report())
        registry.activate(v2.version)
        registry.rollback()
        assert registry.current_version() == 1
        assert registry.previous_version() == 2
        registry.rollback()
        assert registry.current_version() == 2
        assert registry.previous_version() == 1

    def test_rollback_without_previous(self, tmp_path):
        registry = Registry(tmp_path)
        v1 = _publish(registry)
        registry.activate(v1.version, require_gate=False)
        with pytest.raises(NoPreviousVersion):
            registry.rollback()

    def test_gate_report_persisted(self, tmp_path):
        registry = Registry(tmp_path)
        report = _deploy_report()
        v1 = _publish(registry, gate=report)
        loaded = registry.listing()[0]
        assert loaded.gate_report is not None
        assert loaded.gate_report.decision is GateDecision.DEPLOY


class _CrashPoint(Exception):
    pass


def _build_two_version_registry(root) -> Registry:
    registry = Registry(root)
    v1 = _publish(registry)
    registry.activate(v1.version, require_gate=False)
    v2 = _publish(registry, gate=_deploy_report())
    registry.activate(v2.version)
    v3 = _publish(registry, gate=_deploy_report())
    return registry


def _crash_hook(n: int):
    calls = {"count": 0}

    def hook(label: str) -> None:
        calls["count"] += 1
        if calls["count"] > n:
            raise _CrashPoint(label)

    return hook


def _count_steps(action) -> int:
    labels = []
    registry = action(lambda label: labels.append(label))
    return len(labels)


class TestCrashSafety:
    def _assert_recovered(self, root):
        # reopen without hooks: reconcile runs, invariants must hold
        recovered = Registry(root)
        current = recovered.current_version()
        assert current is not None
        assert recovered.is_complete(current)
        previous = recovered.previous_version()
        if previous is not None:
            assert previous != current
            assert recovered.is_complete(previous)
        states = [m.state for m in recovered.listing()]
        assert states.count(ModelState.ACTIVE) == 1
        assert states.count(ModelState.PREVIOUS) <= 1

    def test_activate_crash_points(self, tmp_path):
        # count the checkpoints of a clean activate first
        probe_root = tmp_path / "probe"
        labels: list[str] = []
        registry = _build_two_version_registry(probe_root)
        registry._checkpoint = lambda label: labels.append(label)
        registry.activate(3)
        total_steps = len(labels)
        assert total_steps >= 6

        for crash_at in range(total_steps):
            root = tmp_path / f"activate{crash_at}"
            registry = _build_two_version_registry(root)
            registry._checkpoint = _crash_hook(crash_at)
            with pytest.raises(_CrashPoint):
                registry.activate(3)
            self._assert_recovered(root)

    def test_rollback_crash_points(self, tmp_path):
        probe_root = tmp_path / "probe"
        labels: list[str] = []
        registry = _build_two_version_registry(probe_root)
        registry.activate(3)
        registry._checkpoint = lambda label: labels.append(label)
        registry.rollback()
        total_steps = len(labels)

        for crash_at in range(total_steps):
            root = tmp_path / f"rollback{crash_at}"
            registry = _build_two_version_registry(root)
            registry.activate(3)
            registry._checkpoint = _crash_hook(crash_at)
            with pytest.raises(_CrashPoint):
                registry.rollback()
            self._assert_recovered(root)

    def test_recovered_registry_still_operates(self, tmp_path):
        registry = _build_two_version_registry(tmp_path)
        registry._checkpoint = _crash_hook(2)
        with pytest.raises(_CrashPoint):
            registry.activate(3)
        recovered = Registry(tmp_path)
        recovered.activate(3)
        assert recovered.current_version() == 3
