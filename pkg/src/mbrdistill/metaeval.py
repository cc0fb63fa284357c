"""Meta-evaluation of ESD outputs: SPA, tie-calibrated pairwise accuracy, span F1,
and the PERM-BOTH / paired-bootstrap significance tests."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .core import Annotation, segment_score
from .utility import UTILITIES, corpus_aggregate, soft_f1


class ShapeMismatch(ValueError):
    pass


class TooFewSystems(ValueError):
    pass


class NoPairs(ValueError):
    pass


class MissingEntry(KeyError):
    def __init__(self, system: str, segment: str):
        self.system = system
        self.segment = segment
        super().__init__(f"no annotation for system {system!r}, segment {segment!r}")

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class ScoreMatrix:
    """Sentence-level scores, rows = systems, columns = segments."""

    systems: tuple[str, ...]
    segments: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "systems", tuple(self.systems))
        object.__setattr__(self, "segments", tuple(self.segments))
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (len(self.systems), len(self.segments)):
            raise ShapeMismatch(f"values shape {v.shape} != ({len(self.systems)}, {len(self.segments)})")
        if np.isnan(v).any():
            raise ValueError("missing entries (NaN) are not allowed")
        object.__setattr__(self, "values", v)

    def canonical(self) -> "ScoreMatrix":
        """Rows and columns sorted by id, so results never depend on input order."""
        ri = sorted(range(len(self.systems)), key=lambda i: self.systems[i])
        ci = sorted(range(len(self.segments)), key=lambda j: self.segments[j])
        return ScoreMatrix(
            tuple(self.systems[i] for i in ri),
            tuple(self.segments[j] for j in ci),
            self.values[np.ix_(ri, ci)],
        )

    def system_means(self) -> dict[str, float]:
        return {s: float(np.mean(self.values[i])) for i, s in enumerate(self.systems)}


def _aligned(a: ScoreMatrix, b: ScoreMatrix) -> tuple[ScoreMatrix, ScoreMatrix]:
    a, b = a.canonical(), b.canonical()
    if a.systems != b.systems or a.segments != b.segments:
        raise ShapeMismatch("score matrices cover different systems or segments")
    return a, b


def system_scores(
    annotations: Mapping[tuple[str, str], Annotation],
    systems: Optional[Sequence[str]] = None,
    segments: Optional[Sequence[str]] = None,
) -> tuple[ScoreMatrix, dict[str, float]]:
    """Sentence scores for every (system, segment) and per-system means.

    ``annotations`` is keyed by (system_id, segment_id).
    """
    systems = sorted({k[0] for k in annotations}) if systems is None else list(systems)
    segments = sorted({k[1] for k in annotations}) if segments is None else list(segments)
    values = np.empty((len(systems), len(segments)))
    for i, sys_id in enumerate(systems):
        for j, seg_id in enumerate(segments):
            ann = annotations.get((sys_id, seg_id))
            if ann is None:
                raise MissingEntry(sys_id, seg_id)
            values[i, j] = segment_score(ann)
    m = ScoreMatrix(tuple(systems), tuple(segments), values)
    return m, m.system_means()


# --- system level -----------------------------------------------------------

def _sign_flips(n_items: int, permutations: int, seed: int) -> np.ndarray:
    """(permutations, n_items) matrix of +-1; row i comes from its own seeded stream."""
    out = np.empty((permutations, n_items))
    for i in range(permutations):
        out[i] = np.random.default_rng([seed, i]).integers(0, 2, n_items) * 2.0 - 1.0
    return out


def _perm_pvalue(diff: np.ndarray, flips: np.ndarray) -> float:
    """One-sided p-value that the first system beats the second (mean diff > 0)."""
    observed = diff.sum()
    null = flips @ diff
    return (1.0 + np.count_nonzero(null >= observed)) / (1.0 + flips.shape[0])


def _spa_core(metric: np.ndarray, human: np.ndarray, flips: np.ndarray) -> float:
    acc = []
    for a, b in itertools.combinations(range(metric.shape[0]), 2):
        # Both orientations: with ties p(a>b) + p(b>a) != 1, and the result must not depend on labels.
        fwd = abs(_perm_pvalue(metric[a] - metric[b], flips) - _perm_pvalue(human[a] - human[b], flips))
        rev = abs(_perm_pvalue(metric[b] - metric[a], flips) - _perm_pvalue(human[b] - human[a], flips))
        acc.append(1.0 - (fwd + rev) / 2.0)
    return math.fsum(acc) / len(acc)


def spa(metric: ScoreMatrix, human: ScoreMatrix, permutations: int = 1000, seed: int = 0) -> float:
    """Soft pairwise accuracy between metric and human system rankings.

    For every system pair, the one-sided paired permutation p-value that
    one system is better is computed under both score matrices with the
    same sign-flip draws; SPA averages 1 - |p_metric - p_human|, taking
    each pair in both orientations so system names cannot matter.
    """
    metric, human = _aligned(metric, human)
    if len(metric.systems) < 2:
        raise TooFewSystems("SPA needs at least two systems")
    flips = _sign_flips(len(metric.segments), permutations, seed)
    return _spa_core(metric.values, human.values, flips)


# --- segment level ----------------------------------------------------------

def _pairs(metric, human, groups):
    """Per within-group pair: (|metric diff|, human tie?, metric sign agrees with human sign?)."""
    metric = np.asarray(metric, dtype=np.float64)
    human = np.asarray(human, dtype=np.float64)
    if metric.shape != human.shape or len(groups) != len(metric):
        raise ShapeMismatch("metric, human and groups must be aligned")
    by_group: dict = {}
    for i, g in enumerate(groups):
        by_group.setdefault(g, []).append(i)
    diffs, h_tie, agree = [], [], []
    for idx in by_group.values():
        for i, j in itertools.combinations(idx, 2):
            dm = metric[i] - metric[j]
            dh = human[i] - human[j]
            diffs.append(abs(dm))
            h_tie.append(dh == 0)
            agree.append((dm > 0 and dh > 0) or (dm < 0 and dh < 0))
    if not diffs:
        raise NoPairs("no group contains two or more items")
    return np.array(diffs), np.array(h_tie, dtype=bool), np.array(agree, dtype=bool)


def acc_eq_star(metric, human, groups) -> tuple[float, float]:
    """Pairwise accuracy with tie calibration.

    Pairs are formed inside each group. A metric tie is |diff| <= eps; a
    human tie is exact equality. Accuracy counts concordant non-ties plus
    matched ties. eps sweeps over 0 and every distinct |metric diff|;
    returns (best accuracy, smallest eps achieving it).
    """
    diffs, h_tie, agree = _pairs(metric, human, groups)
    n = len(diffs)
    order = np.argsort(diffs, kind="stable")
    diffs, h_tie, agree = diffs[order], h_tie[order], agree[order]
    # eps below every diff: all pairs are metric non-ties.
    correct = int(np.count_nonzero(agree & ~h_tie))
    best, best_eps = -1, 0.0
    if diffs[0] > 0:
        best, best_eps = correct, 0.0
    i = 0
    while i < n:
        eps = diffs[i]
        while i < n and diffs[i] == eps:
            # pair becomes a metric tie: gains if human tie, loses if it was a correct non-tie
            correct += int(h_tie[i]) - int(agree[i] and not h_tie[i])
            i += 1
        if correct > best:
            best, best_eps = correct, float(eps)
    return best / n, best_eps


# --- span level -------------------------------------------------------------

def span_scores(preds: Sequence[Annotation], golds: Sequence[Annotation], lengths: Sequence[int],
                utility: str = "soft_f1") -> np.ndarray:
    if not (len(preds) == len(golds) == len(lengths)):
        raise ShapeMismatch("predictions, gold and lengths must be aligned")
    fn = UTILITIES[utility]
    return np.array([fn(p, g, n) for p, g, n in zip(preds, golds, lengths)], dtype=np.float64)


# --- significance -----------------------------------------------------------

MetaMetric = Callable[[ScoreMatrix, ScoreMatrix], float]


def _spa_meta(permutations: int, seed: int) -> MetaMetric:
    cache: dict = {}

    def f(metric: ScoreMatrix, human: ScoreMatrix) -> float:
        flips = cache.get(metric.values.shape[1])
        if flips is None:
            flips = cache[metric.values.shape[1]] = _sign_flips(metric.values.shape[1], permutations, seed)
        if len(metric.systems) < 2:
            raise TooFewSystems("SPA needs at least two systems")
        return _spa_core(metric.values, human.values, flips)
    return f


def _acc_meta(metric: ScoreMatrix, human: ScoreMatrix) -> float:
    groups = np.tile(np.arange(metric.values.shape[1]), metric.values.shape[0])
    return acc_eq_star(metric.values.ravel(), human.values.ravel(), groups)[0]


def perm_both_test(
    metric_a: ScoreMatrix,
    metric_b: ScoreMatrix,
    human: ScoreMatrix,
    meta_metric: Union[str, MetaMetric] = "spa",
    permutations: int = 1000,
    seed: int = 0,
    spa_permutations: int = 1000,
) -> float:
    """Two-sided permutation test for meta(A) - meta(B).

    Each resample swaps the A and B score columns of a segment with
    probability 1/2, independently per segment.
    """
    a, h = _aligned(metric_a, human)
    b, _ = _aligned(metric_b, human)
    if meta_metric == "spa":
        meta = _spa_meta(spa_permutations, seed)
    elif meta_metric == "acc_eq_star":
        meta = _acc_meta
    elif callable(meta_metric):
        meta = meta_metric
    else:
        raise ValueError(f"unknown meta metric {meta_metric!r}")
    observed = meta(a, h) - meta(b, h)
    n_seg = a.values.shape[1]
    hits = 0
    for i in range(permutations):
        swap = np.random.default_rng([seed, 1, i]).integers(0, 2, n_seg).astype(bool)
        va = np.where(swap, b.values, a.values)
        vb = np.where(swap, a.values, b.values)
        pa = ScoreMatrix(a.systems, a.segments, va)
        pb = ScoreMatrix(a.systems, a.segments, vb)
        delta = meta(pa, h) - meta(pb, h)
        if abs(delta) >= abs(observed):
            hits += 1
    return (1.0 + hits) / (1.0 + permutations)


def paired_bootstrap(
    pred_a: Sequence[Annotation],
    pred_b: Sequence[Annotation],
    gold: Sequence[Annotation],
    lengths: Sequence[int],
    resamples: int = 1000,
    seed: int = 0,
    utility: str = "soft_f1",
) -> float:
    """One-sided p-value that A's corpus statistic beats B's.

    Counts resamples (segments drawn with replacement) in which B scores at
    least as well as A, add-one smoothed.
    """
    if not (len(pred_a) == len(pred_b) == len(gold)):
        raise ShapeMismatch("predictions and gold must be aligned")
    sa = span_scores(pred_a, gold, lengths, utility)
    sb = span_scores(pred_b, gold, lengths, utility)
    n = len(sa)
    if n == 0:
        raise ShapeMismatch("no segments")
    hits = 0
    for i in range(resamples):
        idx = np.random.default_rng([seed, 2, i]).integers(0, n, n)
        if sb[idx].sum() >= sa[idx].sum():
            hits += 1
    return (1.0 + hits) / (1.0 + resamples)


# --- report -----------------------------------------------------------------

@dataclass
class Significance:
    comparison: str
    metric: str
    test: str
    p_value: float
    seed: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class MetricReport:
    spa: float
    acc_eq_star: float
    epsilon: float
    soft_f1: float
    exact_f1: float
    per_direction: dict = field(default_factory=dict)
    significance: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "spa": self.spa,
            "acc_eq_star": self.acc_eq_star,
            "epsilon": self.epsilon,
            "soft_f1": self.soft_f1,
            "f1": self.exact_f1,
            "per_direction": self.per_direction,
            "significance": [s.to_dict() for s in self.significance],
        }

    def table(self, name: str = "predictions") -> str:
        rows = [("Method", "SPA", "Acc_eq*", "SoftF1", "F1")]
        for d, v in sorted(self.per_direction.items()):
            rows.append((f"{name} [{d}]", _fmt(v["spa"]), _fmt(v["acc_eq_star"]), _fmt(v["soft_f1"]), _fmt(v["f1"])))
        rows.append((f"{name} [avg]", _fmt(self.spa), _fmt(self.acc_eq_star), _fmt(self.soft_f1), _fmt(self.exact_f1)))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        for s in self.significance:
            lines.append(f"{s.metric} {s.comparison}: p={s.p_value:.4f} ({s.test})")
        return "\n".join(lines)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "-"
    return f"{x:.3f}".replace("0.", ".", 1) if 0 <= x < 1 else f"{x:.3f}"


@dataclass
class EvalItem:
    """One (system, segment) prediction with its gold annotation."""

    system_id: str
    segment_id: str
    direction: str
    translation_len: int
    pred: Annotation
    gold: Annotation
    baseline: Optional[Annotation] = None


def _direction_metrics(items: list[EvalItem], permutations: int, seed: int, pred_attr: str = "pred") -> dict:
    systems = sorted({it.system_id for it in items})
    pred_map = {(it.system_id, it.segment_id): getattr(it, pred_attr) for it in items}
    gold_map = {(it.system_id, it.segment_id): it.gold for it in items}
    metric_m, _ = system_scores(pred_map)
    human_m, _ = system_scores(gold_map, metric_m.systems, metric_m.segments)
    out: dict = {"systems": len(systems), "segments": len(metric_m.segments)}
    out["spa"] = spa(metric_m, human_m, permutations, seed) if len(systems) >= 2 else None
    try:
        acc, eps = _acc_with_eps(metric_m, human_m)
    except NoPairs:
        acc, eps = None, None
    out["acc_eq_star"], out["epsilon"] = acc, eps
    preds = [getattr(it, pred_attr) for it in items]
    golds = [it.gold for it in items]
    lens = [it.translation_len for it in items]
    out["soft_f1"] = corpus_aggregate(span_scores(preds, golds, lens, "soft_f1").tolist())
    out["f1"] = corpus_aggregate(span_scores(preds, golds, lens, "exact_f1").tolist())
    return out


def _acc_with_eps(metric: ScoreMatrix, human: ScoreMatrix) -> tuple[float, float]:
    groups = np.tile(np.arange(metric.values.shape[1]), metric.values.shape[0])
    return acc_eq_star(metric.values.ravel(), human.values.ravel(), groups)


def _mean_defined(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def evaluate(
    items: Sequence[EvalItem],
    permutations: int = 1000,
    resamples: int = 1000,
    seed: int = 0,
    significance_permutations: int = 200,
) -> MetricReport:
    """Full report; top-level numbers average the per-direction values.

    When items carry a baseline annotation, predictions are tested against
    it: PERM-BOTH for SPA and Acc_eq*, paired bootstrap for SoftF1.
    """
    by_dir: dict[str, list[EvalItem]] = {}
    for it in items:
        by_dir.setdefault(it.direction, []).append(it)
    per_dir = {d: _direction_metrics(v, permutations, seed) for d, v in sorted(by_dir.items())}
    sig = []
    if items and all(it.baseline is not None for it in items):
        for d, v in sorted(by_dir.items()):
            pred_map = {(it.system_id, it.segment_id): it.pred for it in v}
            base_map = {(it.system_id, it.segment_id): it.baseline for it in v}
            gold_map = {(it.system_id, it.segment_id): it.gold for it in v}
            pm, _ = system_scores(pred_map)
            bm, _ = system_scores(base_map, pm.systems, pm.segments)
            hm, _ = system_scores(gold_map, pm.systems, pm.segments)
            comparison = f"predictions>baseline [{d}]"
            if len(pm.systems) >= 2:
                p = perm_both_test(pm, bm, hm, "spa", significance_permutations, seed, permutations)
                sig.append(Significance(comparison, "spa", "perm-both", p, seed))
                p = perm_both_test(pm, bm, hm, "acc_eq_star", significance_permutations, seed)
                sig.append(Significance(comparison, "acc_eq_star", "perm-both", p, seed))
            p = paired_bootstrap(
                [it.pred for it in v], [it.baseline for it in v], [it.gold for it in v],
                [it.translation_len for it in v], resamples, seed,
            )
            sig.append(Significance(comparison, "soft_f1", "paired-bootstrap", p, seed))
    return MetricReport(
        spa=_mean_defined(v["spa"] for v in per_dir.values()),
        acc_eq_star=_mean_defined(v["acc_eq_star"] for v in per_dir.values()),
        epsilon=_mean_defined(v["epsilon"] for v in per_dir.values()),
        soft_f1=_mean_defined(v["soft_f1"] for v in per_dir.values()),
        exact_f1=_mean_defined(v["f1"] for v in per_dir.values()),
        per_direction=per_dir,
        significance=sig,
    )
