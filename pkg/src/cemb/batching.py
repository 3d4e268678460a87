"""Anchor/positive/negative group construction from NLI-labelled pair batches."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, ParameterError, UsageError

LABELS = ("entailment", "neutral", "contradiction")
LABEL_IDS = {name: i for i, name in enumerate(LABELS)}
ENTAILMENT, NEUTRAL, CONTRADICTION = LABELS


@dataclass(frozen=True)
class LabeledPair:
    premise: str
    hypothesis: str
    label: str

    def __post_init__(self):
        if self.label not in LABEL_IDS:
            raise DataError(f"unknown NLI label {self.label!r}; expected one of {LABELS}")

    @property
    def class_id(self) -> int:
        return LABEL_IDS[self.label]


@dataclass(frozen=True)
class AnchorGroup:
    anchor: int
    positives: tuple[int, ...]
    negatives: tuple[int, ...]


@dataclass(frozen=True)
class SelectionPolicy:
    """Per-anchor caps on positives/negatives; ``None`` means use all candidates."""

    n_pos_cap: int | None = None
    n_neg_cap: int | None = None

    def __post_init__(self):
        for cap in (self.n_pos_cap, self.n_neg_cap):
            if cap is not None and cap < 1:
                raise ParameterError(f"selection caps must be positive or ALL, got {cap}")

    @classmethod
    def parse(cls, name: str) -> "SelectionPolicy":
        """Parse names like ``3p3n``, ``3palln`` or ``allpalln``."""
        m = re.fullmatch(r"(\d+|all)p(\d+|all)n", name.strip().lower())
        if not m:
            raise ParameterError(f"cannot parse selection policy {name!r}")
        caps = [None if part == "all" else int(part) for part in m.groups()]
        return cls(*caps)

    @property
    def name(self) -> str:
        fmt = lambda cap: "all" if cap is None else str(cap)  # noqa: E731
        return f"{fmt(self.n_pos_cap)}p{fmt(self.n_neg_cap)}n"


ALLPALLN = SelectionPolicy()


@dataclass
class GroupedBatch:
    sentences: list[str]
    groups: list[AnchorGroup]
    # (anchor index, hypothesis index) -> label for every pair present in the batch
    pair_labels: dict[tuple[int, int], str]


class _SentenceTable:
    def __init__(self):
        self.sentences: list[str] = []
        self.index: dict[str, int] = {}

    def add(self, text: str) -> int:
        if text not in self.index:
            self.index[text] = len(self.sentences)
            self.sentences.append(text)
        return self.index[text]


def sentence_table(batch: Sequence[LabeledPair]) -> tuple[list[str], list[tuple[int, int]]]:
    """Deduplicated sentences in first-appearance order plus (premise, hypothesis) indices per pair."""
    table = _SentenceTable()
    idx = [(table.add(p.premise), table.add(p.hypothesis)) for p in batch]
    return table.sentences, idx


def _cap(candidates: list[int], cap: int | None, rng: np.random.Generator) -> tuple[int, ...]:
    if cap is None or len(candidates) <= cap:
        return tuple(candidates)
    chosen = np.sort(rng.choice(len(candidates), size=cap, replace=False))
    return tuple(candidates[i] for i in chosen)


def build_groups(batch: Sequence[LabeledPair], policy: SelectionPolicy = ALLPALLN, seed: int = 0) -> GroupedBatch:
    """One anchor group per distinct premise in the batch.

    Positives are the premise's entailment hypotheses. Negatives are its
    neutral/contradiction hypotheses plus every hypothesis paired with another
    premise, minus strings already positive for this anchor or equal to it.
    Caps are applied by seeded uniform sampling without replacement; groups
    without positives are dropped.
    """
    if not batch:
        raise UsageError("build_groups needs a nonempty batch")
    sentences, idx = sentence_table(batch)
    rng = np.random.default_rng(seed)

    pair_labels: dict[tuple[int, int], str] = {}
    premises: list[int] = []
    for pair, (pi, hi) in zip(batch, idx):
        if pi not in premises:
            premises.append(pi)
        # an entailment annotation wins over a conflicting duplicate
        if pair_labels.get((pi, hi)) != ENTAILMENT:
            pair_labels[(pi, hi)] = pair.label

    groups = []
    for anchor in premises:
        positives = list(dict.fromkeys(
            hi for pi, hi in idx if pi == anchor and hi != anchor and pair_labels[(pi, hi)] == ENTAILMENT))
        if not positives:
            continue
        excluded = set(positives) | {anchor}
        negatives = list(dict.fromkeys(hi for _, hi in idx if hi not in excluded))
        groups.append(AnchorGroup(anchor, _cap(positives, policy.n_pos_cap, rng),
                                  _cap(negatives, policy.n_neg_cap, rng)))
    return GroupedBatch(sentences, groups, pair_labels)


def expand_augment(batch: Sequence[LabeledPair], policy: SelectionPolicy = ALLPALLN, seed: int = 0) -> list[LabeledPair]:
    """Pairs (anchor, positive) and (anchor, negative) from ``build_groups``, for CE-only training.

    Negatives keep their original label when they were paired with the anchor;
    cross-premise negatives are labelled neutral.
    """
    gb = build_groups(batch, policy, seed)
    out = []
    for g in gb.groups:
        anchor = gb.sentences[g.anchor]
        for p in g.positives:
            out.append(LabeledPair(anchor, gb.sentences[p], ENTAILMENT))
        for n in g.negatives:
            out.append(LabeledPair(anchor, gb.sentences[n], gb.pair_labels.get((g.anchor, n), NEUTRAL)))
    return out
