from __future__ import annotations

import json
import math

import pytest

from sentinel.sim import (
    ErrorModel,
    InProcessDriver,
    InvalidScenario,
    SimScenario,
    generate_fleet,
    prepare_workdir,
    report_json,
    run_cycle,
    simulate,
)

from sim_oracle import predict_run


def _quiet_scenario(**kwargs) -> SimScenario:
    defaults = dict(n_vehicles=120, seed=99)
    defaults.update(kwargs)
    return SimScenario(**defaults)


class TestScenario:
    def test_distribution_must_sum_to_one(self):
        with pytest.raises(InvalidScenario):
            SimScenario(states={"Texas": 0.5, "California": 0.4})

    def test_missing_plate_rule(self):
        with pytest.raises(InvalidScenario):
            SimScenario(states={"Ohio": 1.0})

    def test_rates_validation(self):
        with pytest.raises(ValueError):
            ErrorModel(substitution_rate=0.9, omission_rate=0.3)

    def test_round_trip(self):
        scenario = _quiet_scenario()
        again = SimScenario.from_dict(json.loads(json.dumps(scenario.to_dict())))
        assert again == scenario


class TestGenerateFleet:
    def test_deterministic_under_seed(self):
        a = generate_fleet(_quiet_scenario(n_vehicles=200))
        b = generate_fleet(_quiet_scenario(n_vehicles=200))
        assert json.dumps(a.vehicles, sort_keys=True) == json.dumps(b.vehicles, sort_keys=True)
        assert a.script == b.script

    def test_different_seed_differs(self):
        a = generate_fleet(_quiet_scenario(seed=1))
        b = generate_fleet(_quiet_scenario(seed=2))
        assert a.script != b.script

    def test_noiseless_answers_equal_truth(self):
        scenario = _quiet_scenario(error_model=ErrorModel(0.0, 0.0, 0.0, 0.0))
        bundle = generate_fleet(scenario)
        for vehicle in bundle.vehicles:
            normalized = "".join(c for c in vehicle["scripted_plate"].upper() if c.isalnum())
            assert normalized == vehicle["truth"]["plate_recognition"]
            assert vehicle["corruption"] == "correct"

    def test_corruption_rate_within_3_sigma(self):
        n = 10_000
        rate = 0.2
        scenario = SimScenario(
            n_vehicles=n,
            seed=5,
            error_model=ErrorModel(substitution_rate=rate, omission_rate=0.0,
                                   addition_rate=0.0, miss_rate=0.0),
        )
        bundle = generate_fleet(scenario)
        corrupted = sum(1 for v in bundle.vehicles if v["corruption"] != "correct")
        sigma = math.sqrt(n * rate * (1 - rate))
        assert abs(corrupted - n * rate) <= 3 * sigma

    def test_plates_follow_state_rules(self):
        bundle = generate_fleet(_quiet_scenario(n_vehicles=300))
        rules = {r["name"]: r["pattern"] for r in bundle.rules}
        for vehicle in bundle.vehicles:
            plate = vehicle["truth"]["plate_recognition"]
            pattern = rules[vehicle["truth"]["state_classification"]]
            assert len(plate) == len(pattern)
            for ch, cls in zip(plate, pattern):
                if cls == "L":
                    assert ch.isalpha()
                elif cls == "D":
                    assert ch.isdigit()

    def test_corrupted_draw_lower_confidence(self):
        bundle = generate_fleet(SimScenario(n_vehicles=4000, seed=8))
        def mean_conf(kind_ok: bool) -> float:
            vals = []
            for v in bundle.vehicles:
                if (v["corruption"] == "correct") == kind_ok:
                    vals.append(math.prod(v["plate_probs"]))
            return sum(vals) / len(vals)
        assert mean_conf(True) > mean_conf(False) + 0.2

    def test_script_covers_both_tasks(self):
        bundle = generate_fleet(_quiet_scenario(n_vehicles=50))
        assert len(bundle.script) == 100
        assert len(bundle.originals) == 100


class TestRunCycle:
    def test_noiseless_run(self, tmp_path):
        scenario = _quiet_scenario(
            n_vehicles=150, error_model=ErrorModel(0.0, 0.0, 0.0, 0.0)
        )
        report = simulate(scenario, tmp_path, mode="inprocess")
        assert report["corrections_accepted"] == 0
        assert report["trigger_firings"] == []
        assert report["swaps"] == []
        labeled = report["final"]["labeled"]
        if labeled["count"]:
            assert labeled["plate_accuracy"] == 1.0

    def test_trigger_firings_match_oracle(self, tmp_path):
        scenario = SimScenario(n_vehicles=2500, seed=31, max_corrections=120, min_corrections=40)
        bundle = generate_fleet(scenario)
        report = simulate(scenario, tmp_path, mode="inprocess")
        oracle = predict_run(bundle.vehicles, scenario.to_dict())
        assert report["trigger_firings"] == oracle.firings
        assert report["corrections_accepted"] == oracle.corrections
        assert report["routing_counts"] == oracle.routing_counts
        assert len(report["swaps"]) == oracle.deployed_rounds

    def test_deterministic_reports_byte_for_byte(self, tmp_path):
        scenario = _quiet_scenario(n_vehicles=400, seed=77)
        a = simulate(scenario, tmp_path / "a", mode="inprocess")
        b = simulate(scenario, tmp_path / "b", mode="inprocess")
        assert report_json(a) == report_json(b)

    def test_every_correction_logged_once(self, tmp_path):
        from sentinel.config import load_config
        from sentinel.runtime import PipelineRuntime

        scenario = _quiet_scenario(n_vehicles=500, seed=13)
        bundle = generate_fleet(scenario)
        config = load_config(prepare_workdir(scenario, tmp_path))
        runtime = PipelineRuntime(config, train_sync=True)
        report = run_cycle(scenario, bundle, InProcessDriver(runtime))
        logged = [
            ev
            for ev in runtime.corrections._store.read_all()
            if ev.get("kind") == "correction" and ev["status"] == "accepted"
        ]
        assert len(logged) == report["corrections_accepted"]
        keys = [(e["image"]["digest"], e["task"], e["corrected_value"]) for e in logged]
        assert len(keys) == len(set(keys))

    def test_operator_error_rate_reduces_corrections(self, tmp_path):
        base = _quiet_scenario(n_vehicles=600, seed=21)
        sloppy = _quiet_scenario(n_vehicles=600, seed=21, operator_error_rate=0.5)
        a = simulate(base, tmp_path / "a", mode="inprocess")
        b = simulate(sloppy, tmp_path / "b", mode="inprocess")
        assert b["corrections_accepted"] < a["corrections_accepted"]


class TestForgettingTrend:
    def test_replay_protects_probe_and_no_replay_degrades(self, tmp_path):
        base = dict(n_vehicles=1500, seed=55, max_corrections=150, min_corrections=50)
        healthy = SimScenario(**base, correction_ratio=0.30)
        degraded = SimScenario(**base, correction_ratio=1.0)
        a = simulate(healthy, tmp_path / "healthy", mode="inprocess")
        b = simulate(degraded, tmp_path / "no_replay", mode="inprocess")
        assert a["max_probe_drop"] <= 0.02
        assert all(t["deployed"] for t in a["trainings"] if t["consumed"] >= 2)
        assert a["corrected_digest_accuracy"] == 1.0
        assert b["max_probe_drop"] > 0.02
        rejected = [t for t in b["trainings"] if t["gate"]["reject_cause"] == "forgetting"]
        assert rejected, "no-replay candidates must be blocked by the forgetting gate"
        assert b["swaps"] == []
