"""Response parsing: plate normalization, state resolution, hedging, formats.

Generated answers arrive as free text ("The plate reads XYZ 5678.",
"possibly ABC1234", "texas"). This module turns them into normalized
structured values plus the two confidence signals the router needs:
detected hedge phrases and a format-validity level.

All operations are pure given an immutable lexicon and rule set.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .vqa import RawResponse, TaskKind

DEFAULT_HEDGE_TERMS = (
    "possibly",
    "might be",
    "unclear",
    "cannot determine",
    "appears to be",
)

DEFAULT_PENALTY_PER_HEDGE = 0.3
DEFAULT_PENALTY_CAP = 0.6

PARTIAL_VALIDITY = 0.5
MALFORMED_VALIDITY = 0.1


class NoPlateToken(Exception):
    """No alphanumeric run of length >= 2 could be extracted from the text."""


class ParseFailure(Exception):
    def __init__(self, task: TaskKind, cause: Exception):
        super().__init__(f"{task.value}: {cause}")
        self.task = task
        self.cause = cause


@lru_cache(maxsize=32)
def _hedge_pattern(terms: Sequence[str]) -> re.Pattern:
    alts = "|".join(re.escape(t) for t in sorted(terms, key=len, reverse=True))
    return re.compile(rf"\b(?:{alts})\b", re.IGNORECASE)


def detect_hedging(
    text: str,
    hedge_terms: Sequence[str] = DEFAULT_HEDGE_TERMS,
    penalty_per_hedge: float = DEFAULT_PENALTY_PER_HEDGE,
    penalty_cap: float = DEFAULT_PENALTY_CAP,
) -> tuple[list[str], float]:
    """Scan for hedge phrases; penalty is `per_hedge * count` capped."""
    if not text:
        return [], 0.0
    found = [m.group(0).lower() for m in _hedge_pattern(tuple(hedge_terms)).finditer(text)]
    penalty = min(penalty_per_hedge * len(found), penalty_cap)
    return found, penalty


_TOKEN_RE = re.compile(r"[A-Za-z0-9]+")


def normalize_plate(text: str, hedge_terms: Sequence[str] = DEFAULT_HEDGE_TERMS) -> str:
    """Normalize a plate answer to uppercase alphanumerics.

    Spaces and hyphens inside the plate are dropped. When the answer is
    prose, the plate is pulled out first: the text is tokenized on
    alphanumeric runs and the longest contiguous run of plate-like tokens
    (separated only by spaces/hyphens) wins. A token is plate-like when it
    contains a digit, is written in all uppercase, or is a short letter
    group sitting next to a digit token. Hedge-lexicon phrases are removed
    up front so "cannot determine" never parses as a plate.

    Raises NoPlateToken when no candidate of length >= 2 survives.
    """
    stripped = _hedge_pattern(tuple(hedge_terms)).sub(" ", text or "")
    tokens = [(m.group(0), m.start(), m.end()) for m in _TOKEN_RE.finditer(stripped)]
    if not tokens:
        raise NoPlateToken(f"no alphanumeric content in {text!r}")

    def has_digit(tok: str) -> bool:
        return any(c.isdigit() for c in tok)

    def all_upper(tok: str) -> bool:
        return tok.isalpha() and tok == tok.upper()

    n = len(tokens)
    candidate = [has_digit(t) or all_upper(t) for t, _, _ in tokens]
    # Lowercase letter groups of plate-like length adopt candidacy from a
    # digit-bearing neighbor ("abc 1234" -> ABC1234).
    for i, (tok, _, _) in enumerate(tokens):
        if candidate[i] or not tok.isalpha() or len(tok) > 4:
            continue
        for j in (i - 1, i + 1):
            if 0 <= j < n and has_digit(tokens[j][0]) and _adjacent(stripped, tokens, min(i, j), max(i, j)):
                candidate[i] = True
                break

    best = ""
    run = ""
    in_run = False
    for i, (tok, _, _) in enumerate(tokens):
        if candidate[i]:
            if in_run and _adjacent(stripped, tokens, i - 1, i):
                run += tok
            else:
                run = tok
            in_run = True
            if len(run) > len(best):
                best = run
        else:
            run = ""
            in_run = False
    if len(best) < 2:
        raise NoPlateToken(f"no plate-like run of length >= 2 in {text!r}")
    return best.upper()


def _adjacent(text: str, tokens: list[tuple[str, int, int]], i: int, j: int) -> bool:
    # Tokens are adjacent when only spaces/hyphens separate them.
    gap = text[tokens[i][2] : tokens[j][1]]
    return all(c in " -" for c in gap)


US_STATES = (
    "Alabama", "Alaska", "Arizona", "Arkansas", "California", "Colorado",
    "Connecticut", "Delaware", "Florida", "Georgia", "Hawaii", "Idaho",
    "Illinois", "Indiana", "Iowa", "Kansas", "Kentucky", "Louisiana",
    "Maine", "Maryland", "Massachusetts", "Michigan", "Minnesota",
    "Mississippi", "Missouri", "Montana", "Nebraska", "Nevada",
    "New Hampshire", "New Jersey", "New Mexico", "New York",
    "North Carolina", "North Dakota", "Ohio", "Oklahoma", "Oregon",
    "Pennsylvania", "Rhode Island", "South Carolina", "South Dakota",
    "Tennessee", "Texas", "Utah", "Vermont", "Virginia", "Washington",
    "West Virginia", "Wisconsin", "Wyoming",
)

US_STATE_ABBREVIATIONS = {
    "AL": "Alabama", "AK": "Alaska", "AZ": "Arizona", "AR": "Arkansas",
    "CA": "California", "CO": "Colorado", "CT": "Connecticut",
    "DE": "Delaware", "FL": "Florida", "GA": "Georgia", "HI": "Hawaii",
    "ID": "Idaho", "IL": "Illinois", "IN": "Indiana", "IA": "Iowa",
    "KS": "Kansas", "KY": "Kentucky", "LA": "Louisiana", "ME": "Maine",
    "MD": "Maryland", "MA": "Massachusetts", "MI": "Michigan",
    "MN": "Minnesota", "MS": "Mississippi", "MO": "Missouri",
    "MT": "Montana", "NE": "Nebraska", "NV": "Nevada",
    "NH": "New Hampshire", "NJ": "New Jersey", "NM": "New Mexico",
    "NY": "New York", "NC": "North Carolina", "ND": "North Dakota",
    "OH": "Ohio", "OK": "Oklahoma", "OR": "Oregon", "PA": "Pennsylvania",
    "RI": "Rhode Island", "SC": "South Carolina", "SD": "South Dakota",
    "TN": "Tennessee", "TX": "Texas", "UT": "Utah", "VT": "Vermont",
    "VA": "Virginia", "WA": "Washington", "WV": "West Virginia",
    "WI": "Wisconsin", "WY": "Wyoming",
}


@dataclass(frozen=True)
class StateLexicon:
    """Canonical US state names plus abbreviation and alias lookups."""

    canonical: tuple[str, ...] = US_STATES
    abbreviations: dict[str, str] = field(default_factory=lambda: dict(US_STATE_ABBREVIATIONS))
    aliases: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        canon = set(self.canonical)
        for src, name in list(self.abbreviations.items()) + list(self.aliases.items()):
            if name not in canon:
                raise ValueError(f"{src!r} maps to non-canonical {name!r}")
        # Precompiled scanners; longest alternatives first so a containing
        # name ("West Virginia") wins over its substring ("Virginia").
        by_lower = {name.lower(): name for name in self.canonical}
        by_lower.update({alias.lower(): name for alias, name in self.aliases.items()})
        name_alts = "|".join(
            re.escape(key) for key in sorted(by_lower, key=len, reverse=True)
        )
        abbr_alts = "|".join(re.escape(a) for a in sorted(self.abbreviations, reverse=True))
        object.__setattr__(self, "_by_lower", by_lower)
        object.__setattr__(
            self, "_name_regex", re.compile(rf"\b(?:{name_alts})\b", re.IGNORECASE)
        )
        object.__setattr__(self, "_abbr_regex", re.compile(rf"\b(?:{abbr_alts})\b"))


_DEFAULT_LEXICON = StateLexicon()


def default_lexicon() -> StateLexicon:
    return _DEFAULT_LEXICON


def resolve_state(text: str, lexicon: StateLexicon | None = None) -> Optional[str]:
    """Resolve free text to a canonical state name, or None when ambiguous.

    Full names match case-insensitively as whole words anywhere in the
    text; a containing name shadows its substring ("West Virginia" never
    reads as "Virginia"). Two-letter abbreviations match only in uppercase
    (so prose words like "or"/"in" cannot hit Oregon/Indiana), except when
    the whole trimmed input IS the abbreviation.
    """
    if lexicon is None:
        lexicon = _DEFAULT_LEXICON
    if not text or not text.strip():
        return None
    by_lower = lexicon._by_lower

    # Fast path: the text is exactly a name, alias, or abbreviation.
    bare = text.strip().strip(".,!? ").lower()
    hit = by_lower.get(bare)
    if hit is not None:
        return hit
    if bare.upper() in lexicon.abbreviations:
        return lexicon.abbreviations[bare.upper()]

    names = {by_lower[m.group(0).lower()] for m in lexicon._name_regex.finditer(text)}
    names.update(
        lexicon.abbreviations[m.group(0)] for m in lexicon._abbr_regex.finditer(text)
    )
    if len(names) == 1:
        return names.pop()
    return None


@dataclass(frozen=True)
class PlateFormatRule:
    """Positional character-class pattern: L=letter, D=digit, A=either."""

    name: str
    pattern: str
    min_len: int
    max_len: int

    def __post_init__(self):
        if self.min_len < 2:
            raise ValueError("min_len must be >= 2")
        if self.min_len > self.max_len:
            raise ValueError("min_len must be <= max_len")
        if any(c not in "LDA" for c in self.pattern):
            raise ValueError(f"pattern {self.pattern!r} may only contain L, D, A")

    @property
    def informative(self) -> bool:
        # An all-wildcard pattern only gates length; an exact match
        # against it carries no class information.
        return any(c in "LD" for c in self.pattern)

    def length_ok(self, plate: str) -> bool:
        return self.min_len <= len(plate) <= self.max_len

    def classes_match(self, plate: str) -> bool:
        if len(plate) > len(self.pattern):
            return False
        for ch, cls in zip(plate, self.pattern):
            if cls == "L" and not ch.isalpha():
                return False
            if cls == "D" and not ch.isdigit():
                return False
        return True


GENERIC_RULE = PlateFormatRule(name="generic", pattern="A" * 8, min_len=4, max_len=8)


def load_format_rules(path: str | Path) -> list[PlateFormatRule]:
    """Load rules from a JSON list of {name, pattern, min_len, max_len}."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return [
        PlateFormatRule(
            name=entry["name"],
            pattern=entry["pattern"],
            min_len=int(entry["min_len"]),
            max_len=int(entry["max_len"]),
        )
        for entry in raw
    ]


def validate_format(
    plate: str,
    rules: Iterable[PlateFormatRule],
    partial_validity: float = PARTIAL_VALIDITY,
    malformed_validity: float = MALFORMED_VALIDITY,
) -> float:
    """Score an already-normalized plate against the format rules.

    Full validity needs an exact positional match on an informative rule;
    a right-length plate with class mismatches (or one that only clears an
    all-wildcard rule) scores partial; anything else is malformed.
    """
    exact_informative = False
    length_only = False
    for rule in rules:
        if not rule.length_ok(plate):
            continue
        if rule.classes_match(plate) and rule.informative:
            exact_informative = True
            break
        length_only = True
    if exact_informative:
        return 1.0
    if length_only:
        return partial_validity
    return malformed_validity


@dataclass(frozen=True)
class ParsedAnswer:
    task: TaskKind
    value: str
    hedge_terms: tuple[str, ...]
    format_validity: float
    raw_text: str

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "value": self.value,
            "hedge_terms": list(self.hedge_terms),
            "format_validity": self.format_validity,
            "raw_text": self.raw_text,
        }


@dataclass(frozen=True)
class ParserConfig:
    hedge_terms: tuple[str, ...] = DEFAULT_HEDGE_TERMS
    penalty_per_hedge: float = DEFAULT_PENALTY_PER_HEDGE
    penalty_cap: float = DEFAULT_PENALTY_CAP
    partial_validity: float = PARTIAL_VALIDITY
    malformed_validity: float = MALFORMED_VALIDITY


def parse(
    raw: RawResponse,
    lexicon: StateLexicon | None = None,
    rules: Sequence[PlateFormatRule] = (GENERIC_RULE,),
    config: ParserConfig = ParserConfig(),
) -> ParsedAnswer:
    """Task-specific parse of a raw generated answer.

    Plate answers are normalized and format-validated; state answers are
    resolved to canonical names (unresolved keeps the trimmed text at
    malformed validity); every other task passes the trimmed text through
    at full validity. Hedging is detected for all tasks.
    """
    hedges, _ = detect_hedging(
        raw.text, config.hedge_terms, config.penalty_per_hedge, config.penalty_cap
    )
    task = raw.task
    if task is TaskKind.PLATE_RECOGNITION:
        try:
            value = normalize_plate(raw.text, config.hedge_terms)
        except NoPlateToken as exc:
            raise ParseFailure(task, exc) from exc
        validity = validate_format(
            value, rules, config.partial_validity, config.malformed_validity
        )
    elif task is TaskKind.STATE_CLASSIFICATION:
        resolved = resolve_state(raw.text, lexicon)
        if resolved is None:
            value = raw.text.strip()
            validity = config.malformed_validity
        else:
            value = resolved
            validity = 1.0
    else:
        value = raw.text.strip()
        validity = 1.0
    return ParsedAnswer(
        task=task,
        value=value,
        hedge_terms=tuple(hedges),
        format_validity=validity,
        raw_text=raw.text,
    )
