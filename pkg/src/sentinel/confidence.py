"""Composite confidence scoring and threshold routing.

The combined score multiplies three signals: the generation probability
(product of per-token probabilities, computed in log space), a hedging
penalty, and format validity. Predictions route to auto-accept, human
review, or auto-reject by comparing the combined score against the
configured thresholds; bands are closed at their lower bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

MAX_UNCERTAINTY_PENALTY = 0.6


class EmptyTokenList(Exception):
    pass


class ProbabilityOutOfRange(Exception):
    pass


class InputOutOfRange(Exception):
    pass


def generation_probability(token_probs: Sequence[float]) -> float:
    """Product of per-token probabilities, summed in log space.

    Log-space accumulation keeps long generations from underflowing.
    """
    if not token_probs:
        raise EmptyTokenList("token_probs must be non-empty")
    log_sum = 0.0
    for p in token_probs:
        if not 0.0 < p <= 1.0:
            raise ProbabilityOutOfRange(f"token probability {p} outside (0,1]")
        log_sum += math.log(p)
    return math.exp(log_sum)


@dataclass(frozen=True)
class ConfidenceBreakdown:
    generation_prob: float
    uncertainty_penalty: float
    format_validity: float
    combined: float

    def to_dict(self) -> dict:
        return {
            "generation_prob": self.generation_prob,
            "uncertainty_penalty": self.uncertainty_penalty,
            "format_validity": self.format_validity,
            "combined": self.combined,
        }


def combine(
    generation_prob: float,
    uncertainty_penalty: float,
    format_validity: float,
) -> ConfidenceBreakdown:
    """combined = generation_prob * (1 - uncertainty_penalty) * format_validity."""
    if not 0.0 <= generation_prob <= 1.0:
        raise InputOutOfRange(f"generation_prob {generation_prob} outside [0,1]")
    if not 0.0 <= uncertainty_penalty <= MAX_UNCERTAINTY_PENALTY:
        raise InputOutOfRange(
            f"uncertainty_penalty {uncertainty_penalty} outside [0,{MAX_UNCERTAINTY_PENALTY}]"
        )
    if not 0.0 <= format_validity <= 1.0:
        raise InputOutOfRange(f"format_validity {format_validity} outside [0,1]")
    combined = generation_prob * (1.0 - uncertainty_penalty) * format_validity
    return ConfidenceBreakdown(
        generation_prob=generation_prob,
        uncertainty_penalty=uncertainty_penalty,
        format_validity=format_validity,
        combined=combined,
    )


class RoutingDecision(str, Enum):
    AUTO_ACCEPT = "auto_accept"
    HUMAN_REVIEW = "human_review"
    AUTO_REJECT = "auto_reject"


@dataclass(frozen=True)
class RoutingThresholds:
    auto_accept: float = 0.95
    review_low: float = 0.70

    def __post_init__(self):
        if not 0.0 < self.review_low < self.auto_accept <= 1.0:
            raise ValueError(
                f"thresholds must satisfy 0 < review_low < auto_accept <= 1, "
                f"got review_low={self.review_low}, auto_accept={self.auto_accept}"
            )


def route(combined: float, thresholds: RoutingThresholds = RoutingThresholds()) -> RoutingDecision:
    """Band the combined confidence; each band is closed at its lower bound."""
    if not 0.0 <= combined <= 1.0:
        raise InputOutOfRange(f"combined confidence {combined} outside [0,1]")
    if combined >= thresholds.auto_accept:
        return RoutingDecision.AUTO_ACCEPT
    if combined >= thresholds.review_low:
        return RoutingDecision.HUMAN_REVIEW
    return RoutingDecision.AUTO_REJECT
