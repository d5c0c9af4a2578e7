"""Validation gating and the versioned model registry with atomic activation.

A candidate model must beat production on a paired held-out comparison
(one-sided t-test) without regressing on the forgetting probe before it may
be activated. Activation and rollback repoint `current`/`previous` link
files via create-then-rename, the only filesystem operation assumed atomic,
so a reader of `current` always sees a complete version even mid-crash.

The Student-t tail probability is computed from scratch with a
continued-fraction regularized incomplete beta; tests pin it against
reference values.
"""

from __future__ import annotations

import math
import os
import re
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from .stores import atomic_write_json, read_json


class InsufficientSamples(Exception):
    pass


class LengthMismatch(Exception):
    pass


class GateNotPassed(Exception):
    pass


class IncompleteArtifact(Exception):
    pass


class NoPreviousVersion(Exception):
    pass


class RegistryWriteFailure(Exception):
    pass


# --- Student-t machinery -----------------------------------------------

_BETACF_MAX_ITER = 300
_BETACF_EPS = 3e-16
_FPMIN = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    # Lentz continued fraction for the incomplete beta integral.
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_EPS:
            return h
    raise ArithmeticError("incomplete beta continued fraction failed to converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    # Use the symmetry relation on whichever side converges fast.
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_survival(t: float, df: int) -> float:
    """P(T >= t) for Student-t with df degrees of freedom."""
    if df < 1:
        raise ValueError("df must be >= 1")
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


def paired_t_test(deltas: Sequence[float]) -> tuple[float, float]:
    """One-sided paired t-test against mean improvement > 0.

    Returns (t statistic, p-value). Uses the sample standard deviation;
    a degenerate zero-variance sample short-circuits to p=0 for a positive
    mean and p=1 otherwise.
    """
    n = len(deltas)
    if n < 2:
        raise InsufficientSamples(f"paired t-test needs n >= 2, got {n}")
    mean = sum(deltas) / n
    var = sum((d - mean) ** 2 for d in deltas) / (n - 1)
    sd = math.sqrt(var)
    if sd == 0.0:
        if mean > 0:
            return math.inf, 0.0
        return (0.0 if mean == 0 else -math.inf), 1.0
    t = mean / (sd / math.sqrt(n))
    return t, t_survival(t, n - 1)


# --- Gate ---------------------------------------------------------------


class GateDecision(str, Enum):
    DEPLOY = "deploy"
    REJECT = "reject"


class RejectCause(str, Enum):
    NOT_SIGNIFICANT = "not_significant"
    FORGETTING = "forgetting"


@dataclass(frozen=True)
class GateReport:
    n: int
    mean_delta: float
    t_statistic: float
    p_value: float
    forgetting_drop: float
    decision: GateDecision
    reject_cause: Optional[RejectCause] = None
    alpha: float = 0.05
    forgetting_limit: float = 0.02

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "mean_delta": self.mean_delta,
            "t_statistic": self.t_statistic if math.isfinite(self.t_statistic) else None,
            "p_value": self.p_value,
            "forgetting_drop": self.forgetting_drop,
            "decision": self.decision.value,
            "reject_cause": self.reject_cause.value if self.reject_cause else None,
            "alpha": self.alpha,
            "forgetting_limit": self.forgetting_limit,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GateReport":
        t = d.get("t_statistic")
        return cls(
            n=int(d["n"]),
            mean_delta=float(d["mean_delta"]),
            t_statistic=float(t) if t is not None else math.inf,
            p_value=float(d["p_value"]),
            forgetting_drop=float(d["forgetting_drop"]),
            decision=GateDecision(d["decision"]),
            reject_cause=RejectCause(d["reject_cause"]) if d.get("reject_cause") else None,
            alpha=float(d.get("alpha", 0.05)),
            forgetting_limit=float(d.get("forgetting_limit", 0.02)),
        )


def evaluate_gate(
    prod_scores: Sequence[float],
    cand_scores: Sequence[float],
    prod_heldout_acc: float,
    cand_heldout_acc: float,
    alpha: float = 0.05,
    forgetting_limit: float = 0.02,
) -> GateReport:
    """Deploy only on significant improvement without forgetting.

    The score lists are per-sample correctness paired by sample id; the
    held-out accuracies come from the frozen forgetting-probe set.
    """
    if len(prod_scores) != len(cand_scores):
        raise LengthMismatch(
            f"paired score lists differ: {len(prod_scores)} vs {len(cand_scores)}"
        )
    deltas = [c - p for p, c in zip(prod_scores, cand_scores)]
    t, p = paired_t_test(deltas)
    drop = prod_heldout_acc - cand_heldout_acc
    if p >= alpha:
        decision, cause = GateDecision.REJECT, RejectCause.NOT_SIGNIFICANT
    elif drop > forgetting_limit:
        decision, cause = GateDecision.REJECT, RejectCause.FORGETTING
    else:
        decision, cause = GateDecision.DEPLOY, None
    return GateReport(
        n=len(deltas),
        mean_delta=sum(deltas) / len(deltas),
        t_statistic=t,
        p_value=p,
        forgetting_drop=drop,
        decision=decision,
        reject_cause=cause,
        alpha=alpha,
        forgetting_limit=forgetting_limit,
    )


# --- Registry ------------------------------------------------------------


class ModelState(str, Enum):
    STAGED = "staged"
    ACTIVE = "active"
    PREVIOUS = "previous"
    ARCHIVED = "archived"


@dataclass
class ModelVersion:
    version: int
    path: Path
    created_at: float
    state: ModelState
    gate_report: Optional[GateReport] = None

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "path": str(self.path),
            "created_at": self.created_at,
            "state": self.state.value,
            "gate_report": self.gate_report.to_dict() if self.gate_report else None,
        }


COMPLETE_MARKER = "COMPLETE"
_VERSION_DIR_RE = re.compile(r"^v(\d+)$")


class Registry:
    """Versioned model directories under one root, with link-file activation.

    Layout: `v{N}/` per version (artifacts, gate_report.json, COMPLETE
    marker written last), `current` and `previous` symlinks, and a
    `registry.json` index. Links are authoritative for active/previous;
    the index remembers staged/archived states and repairs a stale
    `previous` after a crash. All mutations hold one exclusive lock;
    resolving `current` is lock-free.

    `checkpoint` is a test seam invoked between primitive filesystem steps
    so crash points can be enumerated.
    """

    def __init__(self, root: str | Path, checkpoint: Callable[[str], None] | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._checkpoint = checkpoint or (lambda label: None)
        self._reconcile()

    # -- primitive steps --

    def _link_path(self, name: str) -> Path:
        return self.root / name

    def _read_link(self, name: str) -> Optional[int]:
        path = self._link_path(name)
        if not path.is_symlink():
            return None
        m = _VERSION_DIR_RE.match(os.readlink(path))
        return int(m.group(1)) if m else None

    def _set_link(self, name: str, version: int) -> None:
        tmp = self.root / f".{name}.tmp"
        self._checkpoint(f"{name}:pre")
        if tmp.is_symlink() or tmp.exists():
            tmp.unlink()
        os.symlink(f"v{version}", tmp)
        self._checkpoint(f"{name}:staged")
        os.replace(tmp, self._link_path(name))
        self._checkpoint(f"{name}:committed")

    def _drop_link(self, name: str) -> None:
        path = self._link_path(name)
        if path.is_symlink():
            path.unlink()

    # -- state --

    def version_dir(self, version: int) -> Path:
        return self.root / f"v{version}"

    def is_complete(self, version: int) -> bool:
        return (self.version_dir(version) / COMPLETE_MARKER).exists()

    def current_version(self) -> Optional[int]:
        v = self._read_link("current")
        return v if v is not None and self.is_complete(v) else None

    def previous_version(self) -> Optional[int]:
        return self._read_link("previous")

    def _all_version_dirs(self) -> list[int]:
        found = []
        for child in self.root.iterdir():
            m = _VERSION_DIR_RE.match(child.name)
            if m and child.is_dir():
                found.append(int(m.group(1)))
        return sorted(found)

    def _complete_versions(self) -> list[int]:
        return [v for v in self._all_version_dirs() if self.is_complete(v)]

    def next_version(self) -> int:
        with self._lock:
            dirs = self._all_version_dirs()
            return (dirs[-1] + 1) if dirs else 1

    def _index_path(self) -> Path:
        return self.root / "registry.json"

    def _load_index(self) -> dict:
        path = self._index_path()
        if not path.exists():
            return {"versions": {}}
        try:
            return read_json(path)
        except Exception:
            return {"versions": {}}

    def _write_index(self) -> None:
        self._checkpoint("index:pre")
        index = {"versions": {str(m.version): m.to_dict() for m in self.listing()}}
        atomic_write_json(self._index_path(), index)
        self._checkpoint("index:committed")

    def _reconcile(self) -> None:
        """Repair link/index drift after a crash; links win for `current`."""
        with self._lock:
            current = self.current_version()
            previous = self._read_link("previous")
            if previous is not None and (previous == current or not self.is_complete(previous)):
                # Stale previous (mid-swap crash): recover the other half of
                # the old (current, previous) pair from the index.
                index = self._load_index()
                candidate = None
                for entry in index.get("versions", {}).values():
                    v = int(entry["version"])
                    if v == current or not self.is_complete(v):
                        continue
                    state = entry.get("state")
                    if state == ModelState.PREVIOUS.value and v != previous:
                        candidate = v
                        break
                    if state == ModelState.ACTIVE.value:
                        candidate = candidate or v
                if candidate is not None:
                    self._set_link("previous", candidate)
                else:
                    self._drop_link("previous")
            if current is not None:
                self._write_index()

    def listing(self) -> list[ModelVersion]:
        with self._lock:
            current = self.current_version()
            previous = self.previous_version()
            index = self._load_index().get("versions", {})
            out = []
            for v in self._complete_versions():
                dir_ = self.version_dir(v)
                report = None
                report_path = dir_ / "gate_report.json"
                if report_path.exists():
                    report = GateReport.from_dict(read_json(report_path))
                recorded = index.get(str(v), {})
                if v == current:
                    state = ModelState.ACTIVE
                elif v == previous:
                    state = ModelState.PREVIOUS
                elif recorded.get("state") in (ModelState.ACTIVE.value, ModelState.PREVIOUS.value):
                    state = ModelState.ARCHIVED  # displaced by a newer activation
                else:
                    state = ModelState(recorded.get("state", "staged"))
                created = recorded.get("created_at")
                if created is None:
                    created = (dir_ / COMPLETE_MARKER).stat().st_mtime
                out.append(ModelVersion(v, dir_, float(created), state, report))
            return out

    # -- operations --

    def publish(
        self,
        artifacts: Mapping[str, object],
        gate_report: Optional[GateReport] = None,
        version: Optional[int] = None,
    ) -> ModelVersion:
        """Write a new version directory; the COMPLETE marker lands last.

        `artifacts` maps file names to JSON-serializable payloads. A crash
        before the marker leaves an invisible torn directory that later
        publishes skip over.
        """
        with self._lock:
            v = version if version is not None else self.next_version()
            dir_ = self.version_dir(v)
            try:
                dir_.mkdir(parents=True, exist_ok=False)
                self._checkpoint("publish:dir")
                for name, payload in artifacts.items():
                    atomic_write_json(dir_ / name, payload)
                    self._checkpoint(f"publish:artifact:{name}")
                if gate_report is not None:
                    atomic_write_json(dir_ / "gate_report.json", gate_report.to_dict())
                    self._checkpoint("publish:gate_report")
                (dir_ / COMPLETE_MARKER).write_text("", encoding="utf-8")
                self._checkpoint("publish:marker")
            except OSError as exc:
                raise RegistryWriteFailure(f"publish v{v} failed: {exc}") from exc
            record = ModelVersion(v, dir_, time.time(), ModelState.STAGED, gate_report)
            self._write_index()
            return record

    def activate(self, version: int, require_gate: bool = True) -> None:
        """Atomically make `version` the active model.

        Requires a COMPLETE marker and a passing gate report; the gate
        requirement is waived only for the first activation, when there is
        no production model to compare against.
        """
        with self._lock:
            if not self.is_complete(version):
                raise IncompleteArtifact(f"v{version} has no completeness marker")
            old_current = self.current_version()
            if require_gate and old_current is not None:
                report_path = self.version_dir(version) / "gate_report.json"
                if not report_path.exists():
                    raise GateNotPassed(f"v{version} has no gate report")
                report = GateReport.from_dict(read_json(report_path))
                if report.decision is not GateDecision.DEPLOY:
                    raise GateNotPassed(f"v{version} gate decision is {report.decision.value}")
            if old_current is not None and old_current != version:
                self._set_link("previous", old_current)
            self._set_link("current", version)
            self._write_index()

    def rollback(self) -> tuple[int, int]:
        """Swap current and previous; returns (new current, new previous)."""
        with self._lock:
            current = self.current_version()
            previous = self.previous_version()
            if previous is None or current is None or previous == current:
                raise NoPreviousVersion("no previous version to roll back to")
            if not self.is_complete(previous):
                raise IncompleteArtifact(f"previous v{previous} is incomplete")
            self._set_link("current", previous)
            self._set_link("previous", current)
            self._write_index()
            return previous, current

    def load_artifact(self, version: int, name: str):
        return read_json(self.version_dir(version) / name)
