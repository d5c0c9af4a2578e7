"""Closed-loop simulator: synthetic fleets, scripted errors, full HITL cycles.

generate_fleet() builds a deterministic vehicle population with ground
truth, corrupts the scripted answers per the error model, and synthesizes
token probabilities so wrong answers come out underconfident. run_cycle()
then plays every vehicle through recognition, resolves review items the way
a perfect operator would, waits out each triggered training, and collects a
SimReport whose JSON is byte-identical for the same (scenario, seed)
whether the pipeline is driven in-process or over HTTP.
"""

from __future__ import annotations

import hashlib
import json
import random
import socket
import threading
import time
import urllib.error
import urllib.request
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .config import ServiceConfig, load_config
from .runtime import PipelineRuntime
from .vqa import ImageRef, TaskKind

DEFAULT_CONFUSION_PAIRS = (("O", "0"), ("I", "1"), ("B", "8"))
LETTERS = "ABCDEFGHJKLMNPRSTUVWXYZ"  # plate alphabet, skips easy confusables
DIGITS = "0123456789"


@dataclass
class ErrorModel:
    substitution_rate: float = 0.08
    omission_rate: float = 0.05
    addition_rate: float = 0.03
    miss_rate: float = 0.02
    confusion_pairs: tuple = DEFAULT_CONFUSION_PAIRS

    def __post_init__(self):
        rates = (self.substitution_rate, self.omission_rate, self.addition_rate, self.miss_rate)
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("error rates must lie in [0,1]")
        if sum(rates) > 1.0:
            raise ValueError("error rates must sum to at most 1")

    @property
    def total_error_rate(self) -> float:
        return self.substitution_rate + self.omission_rate + self.addition_rate + self.miss_rate


@dataclass
class ConfidenceSynthesis:
    """Beta parameters for drawing generation probabilities."""

    correct_alpha: float = 14.0
    correct_beta: float = 1.0
    corrupted_alpha: float = 2.0
    corrupted_beta: float = 3.0


DEFAULT_STATES = {
    "Texas": 0.30,
    "California": 0.25,
    "Florida": 0.20,
    "New York": 0.15,
    "Arizona": 0.10,
}

DEFAULT_PLATE_RULES = {
    "Texas": "LLLDDDD",
    "California": "DLLLDDD",
    "Florida": "LLLDDDD",
    "New York": "LLLDDDD",
    "Arizona": "LLLDDDD",
}


class InvalidScenario(ValueError):
    pass


@dataclass
class SimScenario:
    n_vehicles: int = 1000
    states: dict = field(default_factory=lambda: dict(DEFAULT_STATES))
    plate_rules: dict = field(default_factory=lambda: dict(DEFAULT_PLATE_RULES))
    error_model: ErrorModel = field(default_factory=ErrorModel)
    confidence: ConfidenceSynthesis = field(default_factory=ConfidenceSynthesis)
    tasks: tuple = (TaskKind.PLATE_RECOGNITION.value, TaskKind.STATE_CLASSIFICATION.value)
    seed: int = 20240601
    quality_range: tuple = (0.5, 1.0)
    operator_error_rate: float = 0.0
    # service knobs carried into the generated config
    correction_ratio: float = 0.30
    batch_size: int = 32
    min_corrections: int = 50
    max_corrections: int = 500
    time_threshold_hours: float = 4.0
    accuracy_drop_threshold: float = 0.05
    trainer_steps: int = 16
    forget_max: float = 0.25
    forget_reference_share: float = 0.70
    window_size: int = 500
    drop_min_window: int = 20
    replay_capacity: int = 10_000
    probe_size: int = 256
    auto_accept: float = 0.95
    review_low: float = 0.70
    gate_alpha: float = 0.05
    forgetting_limit: float = 0.02

    def __post_init__(self):
        total = sum(self.states.values())
        if abs(total - 1.0) > 1e-9:
            raise InvalidScenario(f"state distribution sums to {total}, expected 1.0")
        for state in self.states:
            if state not in self.plate_rules:
                raise InvalidScenario(f"no plate rule for state {state!r}")
        if self.n_vehicles < 1:
            raise InvalidScenario("n_vehicles must be >= 1")

    @property
    def expected_initial_accuracy(self) -> float:
        return 1.0 - self.error_model.total_error_rate

    def to_dict(self) -> dict:
        d = asdict(self)
        d["error_model"]["confusion_pairs"] = [list(p) for p in self.error_model.confusion_pairs]
        d["tasks"] = list(self.tasks)
        d["quality_range"] = list(self.quality_range)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "SimScenario":
        kwargs = dict(raw)
        if "error_model" in kwargs:
            em = dict(kwargs["error_model"])
            if "confusion_pairs" in em:
                em["confusion_pairs"] = tuple(tuple(p) for p in em["confusion_pairs"])
            kwargs["error_model"] = ErrorModel(**em)
        if "confidence" in kwargs:
            kwargs["confidence"] = ConfidenceSynthesis(**kwargs["confidence"])
        if "tasks" in kwargs:
            kwargs["tasks"] = tuple(kwargs["tasks"])
        if "quality_range" in kwargs:
            kwargs["quality_range"] = tuple(kwargs["quality_range"])
        return cls(**kwargs)


MISS_TEXT = "I cannot determine the plate"


def _generate_plate(rng: random.Random, pattern: str) -> str:
    chars = []
    for cls in pattern:
        if cls == "L":
            chars.append(rng.choice(LETTERS))
        elif cls == "D":
            chars.append(rng.choice(DIGITS))
        else:
            chars.append(rng.choice(LETTERS + DIGITS))
    return "".join(chars)


def _corrupt_plate(rng: random.Random, plate: str, model: ErrorModel) -> tuple[str, str]:
    """Returns (scripted answer text, corruption kind)."""
    roll = rng.random()
    if roll < model.miss_rate:
        return MISS_TEXT, "miss"
    roll -= model.miss_rate
    if roll < model.substitution_rate:
        pos = rng.randrange(len(plate))
        ch = plate[pos]
        swap = None
        for a, b in model.confusion_pairs:
            if ch == a:
                swap = b
            elif ch == b:
                swap = a
        if swap is None:
            pool = [c for c in LETTERS + DIGITS if c != ch]
            swap = rng.choice(pool)
        return plate[:pos] + swap + plate[pos + 1 :], "substitution"
    roll -= model.substitution_rate
    if roll < model.omission_rate:
        pos = rng.randrange(len(plate))
        return plate[:pos] + plate[pos + 1 :], "omission"
    roll -= model.omission_rate
    if roll < model.addition_rate:
        pos = rng.randrange(len(plate) + 1)
        return plate[:pos] + rng.choice(LETTERS + DIGITS) + plate[pos:], "addition"
    return plate, "correct"


def _token_probs(rng: random.Random, correct: bool, synth: ConfidenceSynthesis, k: int) -> list[float]:
    if correct:
        g = rng.betavariate(synth.correct_alpha, synth.correct_beta)
    else:
        g = rng.betavariate(synth.corrupted_alpha, synth.corrupted_beta)
    g = min(max(g, 1e-6), 1.0 - 1e-9)
    per_token = g ** (1.0 / k)
    return [per_token] * k


@dataclass
class FleetBundle:
    vehicles: list[dict]
    script: dict
    originals: list[dict]
    rules: list[dict]


def generate_fleet(scenario: SimScenario) -> FleetBundle:
    """Deterministic fleet + backend script + originals manifest."""
    rng = random.Random(scenario.seed)
    state_names = sorted(scenario.states)
    weights = [scenario.states[s] for s in state_names]
    vehicles = []
    script: dict = {}
    originals: list[dict] = []
    seen_plates: set[str] = set()

    for i in range(scenario.n_vehicles):
        state = rng.choices(state_names, weights=weights, k=1)[0]
        pattern = scenario.plate_rules[state]
        plate = _generate_plate(rng, pattern)
        while plate in seen_plates:
            plate = _generate_plate(rng, pattern)
        seen_plates.add(plate)
        digest = hashlib.sha256(f"{scenario.seed}:{i}:{plate}".encode()).hexdigest()
        quality = rng.uniform(*scenario.quality_range)
        image = {
            "id": f"veh-{i:06d}",
            "digest": digest,
            "width": 1920,
            "height": 1080,
            "quality_score": round(quality, 4),
        }
        answer, corruption = _corrupt_plate(rng, plate, scenario.error_model)
        correct = corruption == "correct"
        k = max(3, len(plate) - 1)
        plate_probs = _token_probs(rng, correct, scenario.confidence, k)
        state_probs = _token_probs(rng, True, scenario.confidence, 2)
        # Scripted plate answers carry a separator like real generations do.
        if corruption != "miss":
            split = max(1, len(answer) // 2)
            scripted_text = f"{answer[:split]} {answer[split:]}"
        else:
            scripted_text = answer
        truth = {
            TaskKind.PLATE_RECOGNITION.value: plate,
            TaskKind.STATE_CLASSIFICATION.value: state,
        }
        script[f"{digest}/{TaskKind.PLATE_RECOGNITION.value}"] = {
            "text": scripted_text,
            "token_probs": plate_probs,
        }
        script[f"{digest}/{TaskKind.STATE_CLASSIFICATION.value}"] = {
            "text": state,
            "token_probs": state_probs,
        }
        vehicles.append(
            {
                "image": image,
                "truth": truth,
                "corruption": corruption,
                "scripted_plate": scripted_text,
                "plate_probs": plate_probs,
            }
        )
        for task in (TaskKind.PLATE_RECOGNITION, TaskKind.STATE_CLASSIFICATION):
            originals.append(
                {
                    "image": image,
                    "task": task.value,
                    "target": truth[task.value],
                    "source": "original",
                    "inserted_at": 0.0,
                }
            )

    rules = [
        {
            "name": state,
            "pattern": scenario.plate_rules[state],
            "min_len": len(scenario.plate_rules[state]),
            "max_len": len(scenario.plate_rules[state]),
        }
        for state in state_names
    ]
    return FleetBundle(vehicles=vehicles, script=script, originals=originals, rules=rules)


def prepare_workdir(scenario: SimScenario, workdir: str | Path, bind: str = "127.0.0.1:0") -> Path:
    """Write fleet artifacts and a service config into a directory.

    Returns the config path; the config points the service at the generated
    script, originals manifest, and per-state format rules.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    bundle = generate_fleet(scenario)
    (workdir / "scenario.json").write_text(
        json.dumps(scenario.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
    )
    (workdir / "fleet.json").write_text(
        json.dumps(bundle.vehicles, indent=None, sort_keys=True), encoding="utf-8"
    )
    (workdir / "script.json").write_text(json.dumps(bundle.script, sort_keys=True), encoding="utf-8")
    (workdir / "originals.json").write_text(
        json.dumps(bundle.originals, sort_keys=True), encoding="utf-8"
    )
    (workdir / "rules.json").write_text(json.dumps(bundle.rules, indent=2), encoding="utf-8")
    config = {
        "bind": bind,
        "registry_path": "models",
        "data_dir": "data",
        "seed": scenario.seed,
        "initial_script_path": "script.json",
        "originals_path": "originals.json",
        "format_rules_path": "rules.json",
        "routing": {"auto_accept": scenario.auto_accept, "review_low": scenario.review_low},
        "trigger": {
            "min_corrections": scenario.min_corrections,
            "max_corrections": scenario.max_corrections,
            "time_threshold_hours": scenario.time_threshold_hours,
            "accuracy_drop_threshold": scenario.accuracy_drop_threshold,
        },
        "mix": {"correction_ratio": scenario.correction_ratio, "batch_size": scenario.batch_size},
        "trainer": {
            "steps": scenario.trainer_steps,
            "forget_max": scenario.forget_max,
            "forget_reference_share": scenario.forget_reference_share,
        },
        "gate": {"alpha": scenario.gate_alpha, "forgetting_limit": scenario.forgetting_limit},
        "window_size": scenario.window_size,
        "drop_min_window": scenario.drop_min_window,
        "replay_capacity": scenario.replay_capacity,
        "probe_size": scenario.probe_size,
    }
    config_path = workdir / "config.json"
    config_path.write_text(json.dumps(config, indent=2, sort_keys=True), encoding="utf-8")
    return config_path


# --- drivers -----------------------------------------------------------------


class InProcessDriver:
    """Drives a PipelineRuntime directly; payload shapes mirror the HTTP API."""

    def __init__(self, runtime: PipelineRuntime):
        self.runtime = runtime

    def recognize(self, image: dict, tasks: Sequence[str]) -> dict:
        rec = self.runtime.recognize(ImageRef.from_dict(image), [TaskKind(t) for t in tasks])
        return rec.to_dict()

    def confirm(self, prediction_id: str, operator_id: str) -> dict:
        return self.runtime.confirm(prediction_id, operator_id).to_dict()

    def correct(self, prediction_id: str, operator_id: str, corrections: dict) -> dict:
        rec, job_id = self.runtime.correct(
            prediction_id, operator_id, {TaskKind(k): v for k, v in corrections.items()}
        )
        payload = rec.to_dict()
        payload["training_job"] = job_id
        return payload

    def wait_job(self, job_id: str, timeout: float = 120.0) -> dict:
        return dict(self.runtime.jobs[job_id])  # train_sync: already terminal

    def metrics(self) -> dict:
        return self.runtime.metrics_snapshot()

    def models(self) -> dict:
        return self.runtime.models_listing()


class HttpDriver:
    """Same surface as InProcessDriver, over the wire."""

    def __init__(self, base_url: str):
        self.base_url = base_url.rstrip("/")

    def _request(self, method: str, path: str, body: Optional[dict] = None) -> dict:
        data = json.dumps(body).encode() if body is not None else None
        req = urllib.request.Request(
            self.base_url + path,
            data=data,
            method=method,
            headers={"Content-Type": "application/json"},
        )
        with urllib.request.urlopen(req, timeout=60.0) as resp:
            return json.loads(resp.read().decode())

    def recognize(self, image: dict, tasks: Sequence[str]) -> dict:
        return self._request("POST", "/v1/recognize", {"image": image, "tasks": list(tasks)})

    def confirm(self, prediction_id: str, operator_id: str) -> dict:
        return self._request(
            "POST", f"/v1/review/{prediction_id}/confirm", {"operator_id": operator_id}
        )

    def correct(self, prediction_id: str, operator_id: str, corrections: dict) -> dict:
        return self._request(
            "POST",
            f"/v1/review/{prediction_id}/correct",
            {"operator_id": operator_id, "corrections": corrections},
        )

    def wait_job(self, job_id: str, timeout: float = 120.0) -> dict:
        deadline = time.monotonic() + timeout
        while True:
            job = self._request("GET", f"/v1/jobs/{job_id}")
            if job.get("status") in ("completed", "failed"):
                return job
            if time.monotonic() > deadline:
                raise TimeoutError(f"training job {job_id} did not finish in {timeout}s")
            time.sleep(0.02)

    def metrics(self) -> dict:
        return self._request("GET", "/v1/metrics")

    def models(self) -> dict:
        return self._request("GET", "/v1/models")


# --- the cycle ----------------------------------------------------------------


def run_cycle(scenario: SimScenario, bundle: FleetBundle, driver) -> dict:
    """Play the whole fleet through the pipeline and assemble the SimReport.

    The simulated operator resolves every queued item against ground truth
    (an error-rate knob exists, default 0). After each correction that
    fires a training trigger the driver waits for the job, so model swaps
    land at identical points no matter how the pipeline is hosted.
    """
    op_rng = random.Random(scenario.seed + 777)
    unconsumed: deque = deque()
    deployed_corrections: list[dict] = []
    trainings: list[dict] = []
    swaps: list[int] = []
    submitted = 0
    confirmed = 0
    status_counts: dict[str, int] = {}

    for vehicle in bundle.vehicles:
        resp = driver.recognize(vehicle["image"], scenario.tasks)
        if resp["routing"] == "auto_accept":
            continue
        truth = vehicle["truth"]
        fixes = {}
        for task in scenario.tasks:
            answer = resp["answers"].get(task)
            predicted = answer["value"] if answer else ""
            if predicted != truth[task]:
                fixes[task] = truth[task]
        operator_blunders = (
            scenario.operator_error_rate > 0.0
            and op_rng.random() < scenario.operator_error_rate
        )
        if not fixes or operator_blunders:
            driver.confirm(resp["id"], "sim-operator")
            confirmed += 1
            continue
        cresp = driver.correct(resp["id"], "sim-operator", fixes)
        statuses = cresp["resolution"]["statuses"]
        for task in sorted(fixes):
            status = statuses.get(task, "missing")
            status_counts[status] = status_counts.get(status, 0) + 1
            if status == "accepted":
                submitted += 1
                unconsumed.append(
                    {"image": vehicle["image"], "task": task, "target": truth[task]}
                )
        job_id = cresp.get("training_job")
        if job_id:
            job = driver.wait_job(job_id)
            record = {
                "job_id": job["id"],
                "reason": job["reason"],
                "status": job["status"],
                "consumed": job.get("consumed"),
                "candidate_version": job.get("candidate_version"),
                "deployed": job.get("deployed", False),
                "gate": job.get("gate"),
                "probe_accuracy": job.get("probe_accuracy"),
            }
            trainings.append(record)
            if job["status"] == "completed":
                taken = [unconsumed.popleft() for _ in range(int(job["consumed"]))]
                if job.get("deployed"):
                    swaps.append(int(job["candidate_version"]))
                    deployed_corrections.extend(taken)

    metrics = driver.metrics()
    models = driver.models()

    recheck = None
    if deployed_corrections:
        ok = 0
        for entry in deployed_corrections:
            resp = driver.recognize(entry["image"], [entry["task"]])
            answer = resp["answers"].get(entry["task"])
            if answer and answer["value"] == entry["target"]:
                ok += 1
        recheck = ok / len(deployed_corrections)

    probe_drops = [
        t["gate"]["forgetting_drop"] for t in trainings if t.get("gate") is not None
    ]
    report = {
        "scenario": scenario.to_dict(),
        "n_vehicles": scenario.n_vehicles,
        "routing_counts": metrics["routing_counts"],
        "routing_fractions": metrics["routing_fractions"],
        "reviews": {"confirmed": confirmed, "correction_statuses": status_counts},
        "corrections_accepted": submitted,
        "trainings": trainings,
        "trigger_firings": [t["reason"] for t in trainings],
        "swaps": swaps,
        "probe_drops": probe_drops,
        "max_probe_drop": max(probe_drops) if probe_drops else None,
        "corrected_digest_accuracy": recheck,
        "final": {
            "model_version": models["current"],
            "previous_version": models["previous"],
            "pending_corrections": metrics["pending_corrections"],
            "secondary_review": metrics["secondary_review"],
            "rolling_accuracy": metrics["rolling_accuracy"],
            "baseline_accuracy": metrics["baseline_accuracy"],
            "labeled": metrics["labeled"],
            "latency": metrics["latency"],
            "training_rounds": metrics["training_rounds"],
        },
    }
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


# --- hosting helpers -------------------------------------------------------------


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class ServiceThread:
    """uvicorn in a daemon thread, for HTTP-mode simulation and tests."""

    def __init__(self, config: ServiceConfig):
        import uvicorn

        from .service import create_app

        self.config = config
        self.runtime = PipelineRuntime(config, train_sync=False)
        app = create_app(self.runtime)
        self._server = uvicorn.Server(
            uvicorn.Config(app, host=config.host, port=config.port, log_level="error")
        )
        self._thread = threading.Thread(target=self._server.run, daemon=True)

    @property
    def base_url(self) -> str:
        return f"http://{self.config.host}:{self.config.port}"

    def start(self, timeout: float = 15.0) -> None:
        self._thread.start()
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            try:
                with urllib.request.urlopen(self.base_url + "/v1/health", timeout=1.0):
                    return
            except (urllib.error.URLError, ConnectionError, OSError):
                time.sleep(0.05)
        raise TimeoutError("service did not become healthy")

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10.0)


def simulate(
    scenario: SimScenario,
    workdir: str | Path,
    mode: str = "inprocess",
) -> dict:
    """Prepare a working directory and run one full closed-loop cycle."""
    workdir = Path(workdir)
    bundle = generate_fleet(scenario)
    if mode == "inprocess":
        config_path = prepare_workdir(scenario, workdir)
        config = load_config(config_path)
        runtime = PipelineRuntime(config, train_sync=True)
        driver = InProcessDriver(runtime)
        return run_cycle(scenario, bundle, driver)
    if mode == "http":
        port = free_port()
        config_path = prepare_workdir(scenario, workdir, bind=f"127.0.0.1:{port}")
        config = load_config(config_path)
        service = ServiceThread(config)
        service.start()
        try:
            driver = HttpDriver(service.base_url)
            return run_cycle(scenario, bundle, driver)
        finally:
            service.stop()
    raise ValueError(f"unknown mode {mode!r}")
