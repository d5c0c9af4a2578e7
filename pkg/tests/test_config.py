from __future__ import annotations

import json

import pytest

from sentinel.config import ConfigError, load_config


def _write(tmp_path, payload):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def test_defaults_without_file():
    config = load_config(None)
    assert config.routing.auto_accept == 0.95
    assert config.routing.review_low == 0.70
    assert config.trigger.min_corrections == 50
    assert config.trigger.max_corrections == 500
    assert config.mix.correction_ratio == 0.30
    assert config.mix.batch_size == 32
    assert config.quality.min_quality_score == 0.30
    assert config.replay_capacity == 10_000


def test_parser_overrides_propagate(tmp_path):
    config = load_config(
        _write(
            tmp_path,
            {
                "hedge_terms": ["maybe", "perhaps"],
                "hedge_penalty_per_term": 0.2,
                "hedge_penalty_cap": 0.4,
                "partial_validity": 0.6,
                "malformed_validity": 0.05,
            },
        )
    )
    assert config.parser.hedge_terms == ("maybe", "perhaps")
    assert config.parser.penalty_per_hedge == 0.2
    assert config.parser.penalty_cap == 0.4
    assert config.parser.partial_validity == 0.6
    assert config.parser.malformed_validity == 0.05


def test_routing_and_gate_sections(tmp_path):
    config = load_config(
        _write(
            tmp_path,
            {
                "routing": {"auto_accept": 0.9, "review_low": 0.5},
                "gate": {"alpha": 0.01, "forgetting_limit": 0.05},
                "trainer": {"steps": 4, "forget_max": 0.5},
            },
        )
    )
    assert config.routing.auto_accept == 0.9
    assert config.gate.alpha == 0.01
    assert config.trainer.steps == 4
    assert config.trainer.forgetting().f_max == 0.5


def test_format_rules_path_prepends_generic(tmp_path):
    rules = tmp_path / "rules.json"
    rules.write_text(
        '[{"name":"Texas","pattern":"LLLDDDD","min_len":7,"max_len":7}]', encoding="utf-8"
    )
    config = load_config(_write(tmp_path, {"format_rules_path": "rules.json"}))
    names = [rule.name for rule in config.format_rules]
    assert names == ["generic", "Texas"]


def test_relative_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "script.json").write_text("{}", encoding="utf-8")
    config = load_config(_write(tmp_path, {"initial_script_path": "script.json"}))
    assert config.initial_script_path == str(tmp_path / "script.json")


def test_invalid_threshold_order(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, {"routing": {"auto_accept": 0.5, "review_low": 0.7}}))


def test_bad_bind_format(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, {"bind": "nonsense"}))


def test_missing_rules_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, {"format_rules_path": "ghost.json"}))
