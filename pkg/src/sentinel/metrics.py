"""Evaluation metrics: edit distance, CER, exact-match accuracy, ECE, taxonomy.

Works over pairs of normalized plate strings with the prediction's
confidence attached. The calibration binning doubles as reliability-diagram
data. The error classifier buckets misses the way an operator would label
them: substitutions, omissions, additions, complete misses, format errors;
state mistakes are counted on their own axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence

from .parsing import PlateFormatRule, validate_format


class EmptyInput(Exception):
    pass


class EmptyTruth(Exception):
    pass


@dataclass(frozen=True)
class EvalPair:
    predicted: str
    truth: str
    confidence: float = 0.0
    state_predicted: Optional[str] = None
    state_truth: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"predicted": self.predicted, "truth": self.truth, "confidence": self.confidence}
        if self.state_predicted is not None:
            d["state_predicted"] = self.state_predicted
        if self.state_truth is not None:
            d["state_truth"] = self.state_truth
        return d


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit-cost insert/delete/substitute."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    # Single-row dynamic program over the shorter string.
    if len(b) > len(a):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cost = 0 if ca == cb else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[-1]


def cer(pairs: Sequence[EvalPair]) -> float:
    """Mean per-pair edit distance normalized by ground-truth length."""
    if not pairs:
        raise EmptyInput("no evaluation pairs")
    total = 0.0
    for pair in pairs:
        if not pair.truth:
            raise EmptyTruth(f"empty ground truth for prediction {pair.predicted!r}")
        total += edit_distance(pair.predicted, pair.truth) / len(pair.truth)
    return total / len(pairs)


def plate_accuracy(pairs: Sequence[EvalPair]) -> float:
    """Fraction of exact matches between predicted and truth."""
    if not pairs:
        raise EmptyInput("no evaluation pairs")
    return sum(1 for p in pairs if p.predicted == p.truth) / len(pairs)


@dataclass(frozen=True)
class CalibrationBin:
    lower: float
    upper: float
    count: int
    accuracy: float
    mean_confidence: float

    def to_dict(self) -> dict:
        return {
            "lower": self.lower,
            "upper": self.upper,
            "count": self.count,
            "accuracy": self.accuracy,
            "mean_confidence": self.mean_confidence,
        }


def ece(pairs: Sequence[EvalPair], num_bins: int = 10) -> tuple[float, list[CalibrationBin]]:
    """Expected calibration error over equal-width confidence bins.

    Bins cover [0,1); the last bin is closed at 1.0. Empty bins contribute
    zero and are still returned so the reliability diagram has a full axis.
    """
    if not pairs:
        raise EmptyInput("no evaluation pairs")
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    counts = [0] * num_bins
    correct = [0] * num_bins
    conf_sum = [0.0] * num_bins
    for pair in pairs:
        c = pair.confidence
        if not 0.0 <= c <= 1.0:
            raise ValueError(f"confidence {c} outside [0,1]")
        idx = min(int(c * num_bins), num_bins - 1)
        counts[idx] += 1
        conf_sum[idx] += c
        if pair.predicted == pair.truth:
            correct[idx] += 1
    n = len(pairs)
    bins = []
    total = 0.0
    for m in range(num_bins):
        lower, upper = m / num_bins, (m + 1) / num_bins
        if counts[m]:
            acc = correct[m] / counts[m]
            conf = conf_sum[m] / counts[m]
            total += (counts[m] / n) * abs(acc - conf)
        else:
            acc = 0.0
            conf = 0.0
        bins.append(CalibrationBin(lower, upper, counts[m], acc, conf))
    return total, bins


class ErrorCategory(str, Enum):
    CORRECT = "correct"
    CHARACTER_SUBSTITUTION = "character_substitution"
    CHARACTER_OMISSION = "character_omission"
    CHARACTER_ADDITION = "character_addition"
    COMPLETE_MISS = "complete_miss"
    STATE_MISCLASSIFICATION = "state_misclassification"
    FORMAT_ERROR = "format_error"


def classify_error(
    pair: EvalPair,
    rules: Sequence[PlateFormatRule] | None = None,
    malformed_validity: float = 0.1,
) -> ErrorCategory:
    """Primary error label for a plate prediction.

    Precedence: correct > complete miss > format error > length-based
    categories. The format check needs rules; without them that branch is
    skipped. State disagreement is not a primary label here — see
    state_mismatch().
    """
    if pair.predicted == pair.truth:
        return ErrorCategory.CORRECT
    if not pair.predicted:
        return ErrorCategory.COMPLETE_MISS
    if rules is not None:
        validity = validate_format(pair.predicted, rules, malformed_validity=malformed_validity)
        if validity == malformed_validity:
            return ErrorCategory.FORMAT_ERROR
    if len(pair.predicted) == len(pair.truth):
        return ErrorCategory.CHARACTER_SUBSTITUTION
    if len(pair.predicted) < len(pair.truth):
        return ErrorCategory.CHARACTER_OMISSION
    return ErrorCategory.CHARACTER_ADDITION


def state_mismatch(pair: EvalPair) -> bool:
    """State-axis error: both fields present and different."""
    return (
        pair.state_predicted is not None
        and pair.state_truth is not None
        and pair.state_predicted != pair.state_truth
    )


def error_histogram(
    pairs: Iterable[EvalPair],
    rules: Sequence[PlateFormatRule] | None = None,
) -> dict[str, int]:
    """Counts per plate-axis category, plus state misclassifications."""
    hist = {cat.value: 0 for cat in ErrorCategory}
    for pair in pairs:
        hist[classify_error(pair, rules).value] += 1
        if state_mismatch(pair):
            hist[ErrorCategory.STATE_MISCLASSIFICATION.value] += 1
    return hist


def evaluation_report(
    pairs: Sequence[EvalPair],
    num_bins: int = 10,
    rules: Sequence[PlateFormatRule] | None = None,
) -> dict:
    """Full metrics bundle: CER, accuracy, ECE with bins, error histogram."""
    value, bins = ece(pairs, num_bins)
    return {
        "count": len(pairs),
        "cer": cer(pairs),
        "plate_accuracy": plate_accuracy(pairs),
        "ece": value,
        "bins": [b.to_dict() for b in bins],
        "error_histogram": error_histogram(pairs, rules),
    }
