"""Annotation-vs-annotation utilities: SoftF1, exact-match F1, corpus mean."""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

from .core import Annotation, Severity

# Per-character severity weights for SoftF1.
SOFT_WEIGHTS = {Severity.MINOR: 0.5, Severity.MAJOR: 1.0}

Utility = Callable[[Annotation, Annotation, Optional[int]], float]


class EmptyInput(ValueError):
    pass


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _coverage(annotation: Annotation) -> list[tuple[int, int, float]]:
    """Flatten spans into disjoint (start, end, weight) pieces, keeping the max weight per char."""
    events = sorted({p for s in annotation.spans for p in (s.start, s.end)})
    pieces = []
    for lo, hi in zip(events, events[1:]):
        w = 0.0
        for s in annotation.spans:
            if s.start <= lo and hi <= s.end:
                w = max(w, SOFT_WEIGHTS[s.severity])
        if w:
            pieces.append((lo, hi, w))
    return pieces


def soft_f1(pred: Annotation, ref: Annotation, translation_len: Optional[int] = None) -> float:
    """Character-level severity-weighted F1 between two annotations.

    Each character carries the weight of the strongest span covering it
    (minor 0.5, major 1.0); matched mass per character is the smaller of
    the two weights. Two empty annotations agree perfectly (1.0).
    """
    if translation_len is not None:
        pred.check(translation_len)
        ref.check(translation_len)
    if not pred.spans and not ref.spans:
        return 1.0
    if not pred.spans or not ref.spans:
        return 0.0
    p_pieces, r_pieces = _coverage(pred), _coverage(ref)
    p_mass = sum((hi - lo) * w for lo, hi, w in p_pieces)
    r_mass = sum((hi - lo) * w for lo, hi, w in r_pieces)
    matched = 0.0
    i = j = 0
    while i < len(p_pieces) and j < len(r_pieces):
        plo, phi, pw = p_pieces[i]
        rlo, rhi, rw = r_pieces[j]
        overlap = min(phi, rhi) - max(plo, rlo)
        if overlap > 0:
            matched += overlap * min(pw, rw)
        if phi <= rhi:
            i += 1
        else:
            j += 1
    precision = matched / p_mass if p_mass else 0.0
    recall = matched / r_mass if r_mass else 0.0
    return _f1(precision, recall)


def exact_f1(pred: Annotation, ref: Annotation, translation_len: Optional[int] = None) -> float:
    """Strict span F1: a hit needs identical (start, end, severity); category is ignored."""
    if translation_len is not None:
        pred.check(translation_len)
        ref.check(translation_len)
    p, r = set(pred.position_key), set(ref.position_key)
    if not p and not r:
        return 1.0
    if not p or not r:
        return 0.0
    return 2.0 * len(p & r) / (len(p) + len(r))


UTILITIES: dict[str, Utility] = {"soft_f1": soft_f1, "exact_f1": exact_f1}


def corpus_aggregate(per_segment: Sequence[float]) -> float:
    values = list(per_segment)
    if not values:
        raise EmptyInput("corpus_aggregate needs at least one value")
    return math.fsum(values) / len(values)
