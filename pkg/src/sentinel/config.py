"""Service configuration: file loading, env overrides, validation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .confidence import RoutingThresholds
from .hitl import QualityConfig, TriggerConfig
from .parsing import GENERIC_RULE, ParserConfig, PlateFormatRule, load_format_rules
from .replay import DEFAULT_HYPERPARAMS, DEFAULT_TASK_WEIGHTS, ForgettingConfig, MixConfig
from .vqa import TaskKind


class ConfigError(Exception):
    """Invalid or unusable service configuration (exit code 2)."""


@dataclass
class GateConfig:
    alpha: float = 0.05
    forgetting_limit: float = 0.02


@dataclass
class TrainerSettings:
    steps: int = 16  # batches per training run
    forget_max: float = 0.25
    forget_reference_share: float = 0.70
    hyperparams: dict = field(default_factory=lambda: dict(DEFAULT_HYPERPARAMS))

    def forgetting(self) -> ForgettingConfig:
        return ForgettingConfig(f_max=self.forget_max, reference_share=self.forget_reference_share)


@dataclass
class ServiceConfig:
    bind: str = "127.0.0.1:8787"
    registry_path: str = "models"
    data_dir: str = "data"
    routing: RoutingThresholds = field(default_factory=RoutingThresholds)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    task_weights: dict = field(default_factory=lambda: dict(DEFAULT_TASK_WEIGHTS))
    quality: QualityConfig = field(default_factory=QualityConfig)
    parser: ParserConfig = field(default_factory=ParserConfig)
    format_rules: list[PlateFormatRule] = field(default_factory=lambda: [GENERIC_RULE])
    gate: GateConfig = field(default_factory=GateConfig)
    trainer: TrainerSettings = field(default_factory=TrainerSettings)
    window_size: int = 500
    drop_min_window: int = 20  # outcomes required before the drop trigger arms
    replay_capacity: int = 10_000
    probe_size: int = 256
    seed: int = 0
    initial_script_path: str | None = None
    originals_path: str | None = None  # manifest feeding replay buffer + probe
    object_store_path: str | None = None
    console_path: str | None = None

    @property
    def host(self) -> str:
        return self.bind.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.bind.rsplit(":", 1)[1])


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ServiceConfig:
    """Build a ServiceConfig from a JSON file plus env/CLI overrides.

    SENTINEL_BIND and SENTINEL_REGISTRY env vars override the file. Any
    validation problem raises ConfigError so the CLI can exit 2.
    """
    raw: dict = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        base = path.parent
    raw.update(overrides or {})

    def _resolve(p: str | None) -> str | None:
        if p is None:
            return None
        p = Path(p)
        return str(p if p.is_absolute() else base / p)

    try:
        cfg = ServiceConfig()
        cfg.bind = os.environ.get("SENTINEL_BIND", raw.get("bind", cfg.bind))
        cfg.registry_path = _resolve(
            os.environ.get("SENTINEL_REGISTRY", raw.get("registry_path", cfg.registry_path))
        )
        cfg.data_dir = _resolve(raw.get("data_dir", cfg.data_dir))
        if "routing" in raw:
            cfg.routing = RoutingThresholds(
                auto_accept=float(raw["routing"].get("auto_accept", 0.95)),
                review_low=float(raw["routing"].get("review_low", 0.70)),
            )
        if "trigger" in raw:
            t = raw["trigger"]
            cfg.trigger = TriggerConfig(
                min_corrections=int(t.get("min_corrections", 50)),
                max_corrections=int(t.get("max_corrections", 500)),
                time_threshold_hours=float(t.get("time_threshold_hours", 4)),
                accuracy_drop_threshold=float(t.get("accuracy_drop_threshold", 0.05)),
            )
        if "mix" in raw:
            cfg.mix = MixConfig(
                correction_ratio=float(raw["mix"].get("correction_ratio", 0.30)),
                batch_size=int(raw["mix"].get("batch_size", 32)),
            )
        if "task_weights" in raw:
            cfg.task_weights = {
                TaskKind(k): float(v) for k, v in raw["task_weights"].items()
            }
        if "quality_threshold" in raw:
            cfg.quality = QualityConfig(min_quality_score=float(raw["quality_threshold"]))
        parser_kwargs = {}
        if "hedge_terms" in raw:
            parser_kwargs["hedge_terms"] = tuple(raw["hedge_terms"])
        if "hedge_penalty_per_term" in raw:
            parser_kwargs["penalty_per_hedge"] = float(raw["hedge_penalty_per_term"])
        if "hedge_penalty_cap" in raw:
            parser_kwargs["penalty_cap"] = float(raw["hedge_penalty_cap"])
        if "partial_validity" in raw:
            parser_kwargs["partial_validity"] = float(raw["partial_validity"])
        if "malformed_validity" in raw:
            parser_kwargs["malformed_validity"] = float(raw["malformed_validity"])
        if parser_kwargs:
            cfg.parser = ParserConfig(**parser_kwargs)
        if "gate" in raw:
            cfg.gate = GateConfig(
                alpha=float(raw["gate"].get("alpha", 0.05)),
                forgetting_limit=float(raw["gate"].get("forgetting_limit", 0.02)),
            )
        if "trainer" in raw:
            t = raw["trainer"]
            cfg.trainer = TrainerSettings(
                steps=int(t.get("steps", 16)),
                forget_max=float(t.get("forget_max", 0.25)),
                forget_reference_share=float(t.get("forget_reference_share", 0.70)),
                hyperparams={**DEFAULT_HYPERPARAMS, **t.get("hyperparams", {})},
            )
        cfg.window_size = int(raw.get("window_size", cfg.window_size))
        cfg.drop_min_window = int(raw.get("drop_min_window", cfg.drop_min_window))
        cfg.replay_capacity = int(raw.get("replay_capacity", cfg.replay_capacity))
        cfg.probe_size = int(raw.get("probe_size", cfg.probe_size))
        cfg.seed = int(raw.get("seed", cfg.seed))
        cfg.initial_script_path = _resolve(raw.get("initial_script_path"))
        cfg.originals_path = _resolve(raw.get("originals_path"))
        cfg.object_store_path = _resolve(raw.get("object_store_path"))
        cfg.console_path = _resolve(raw.get("console_path"))
        if "format_rules_path" in raw and raw["format_rules_path"]:
            rules_path = _resolve(raw["format_rules_path"])
            if not Path(rules_path).exists():
                raise ConfigError(f"format rules file not found: {rules_path}")
            cfg.format_rules = [GENERIC_RULE] + load_format_rules(rules_path)
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc

    for label, p in (
        ("initial_script_path", cfg.initial_script_path),
        ("originals_path", cfg.originals_path),
        ("object_store_path", cfg.object_store_path),
        ("console_path", cfg.console_path),
    ):
        if p is not None and not Path(p).exists():
            raise ConfigError(f"{label} does not exist: {p}")
    try:
        cfg.port  # noqa: B018 - validates bind format
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"bind must be host:port, got {cfg.bind!r}") from exc
    return cfg
