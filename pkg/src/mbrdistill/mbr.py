"""MBR scoring of candidate annotations against a support set."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import Annotation, Segment
from .utility import Utility, soft_f1


class EmptyCandidateSet(ValueError):
    pass


class TooFewCandidates(ValueError):
    def __init__(self, segment_id: str):
        self.segment_id = segment_id
        super().__init__(f"segment {segment_id!r}: utility variance needs at least 2 candidates")


@dataclass(frozen=True)
class CandidateSet:
    """Candidates for one segment. ``support`` defaults to the candidates, duplicates kept."""

    segment: Segment
    candidates: tuple[Annotation, ...]
    support: Optional[tuple[Annotation, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        support = self.candidates if self.support is None else tuple(self.support)
        object.__setattr__(self, "support", support)
        if not self.candidates or not self.support:
            raise EmptyCandidateSet(f"segment {self.segment.segment_id!r} has no candidates")


@dataclass(frozen=True)
class ScoredCandidateSet:
    base: CandidateSet
    scores: tuple[float, ...]
    best_index: int = field(init=False)
    worst_index: int = field(init=False)

    def __post_init__(self):
        if len(self.scores) != len(self.base.candidates):
            raise ValueError("scores must align with candidates")
        # Strict comparisons keep the lowest index on ties.
        best = worst = 0
        for i, s in enumerate(self.scores):
            if s > self.scores[best]:
                best = i
            if s < self.scores[worst]:
                worst = i
        object.__setattr__(self, "best_index", best)
        object.__setattr__(self, "worst_index", worst)

    @property
    def segment(self) -> Segment:
        return self.base.segment

    @property
    def best(self) -> Annotation:
        return self.base.candidates[self.best_index]

    @property
    def worst(self) -> Annotation:
        return self.base.candidates[self.worst_index]


def mbr_score(cset: CandidateSet, utility: Utility = soft_f1) -> ScoredCandidateSet:
    """Average utility of every candidate against the support set.

    Summation runs left to right over the support in its stored order.
    Utilities of repeated (candidate, support) pairs are computed once.
    """
    n = len(cset.segment.translation)
    for a in cset.candidates:
        a.check(n)
    for a in cset.support:
        a.check(n)
    # Keyed on positions and severities only; utilities ignore categories.
    cache: dict[tuple, float] = {}
    sup_keys = [s.position_key for s in cset.support]
    scores = []
    for cand in cset.candidates:
        ck = cand.position_key
        total = 0.0
        for sup, sk in zip(cset.support, sup_keys):
            u = cache.get((ck, sk))
            if u is None:
                u = cache[(ck, sk)] = utility(cand, sup, None)
            total += u
        score = total / len(cset.support)
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"MBR score {score} outside [0, 1]; utility is not bounded")
        scores.append(score)
    return ScoredCandidateSet(cset, tuple(scores))


def score_all(sets: Iterable[CandidateSet], utility: Utility = soft_f1):
    for cset in sets:
        yield mbr_score(cset, utility)


def segment_variance(scores: Sequence[float], segment_id: str = "") -> float:
    if len(scores) < 2:
        raise TooFewCandidates(segment_id)
    return float(np.var(np.asarray(scores, dtype=np.float64)))


def utility_variance(scored: Iterable[ScoredCandidateSet]) -> float:
    """Mean over segments of the population variance of candidate MBR scores."""
    variances = [segment_variance(s.scores, s.segment.segment_id) for s in scored]
    if not variances:
        raise ValueError("utility_variance needs at least one scored set")
    return float(np.mean(variances))
