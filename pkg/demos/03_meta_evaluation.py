"""
Meta-evaluating an error-span detector
======================================

Given gold annotations for several MT systems, how good is a detector?
System level uses soft pairwise accuracy (SPA) over MQM-style system scores.
Segment level uses pairwise accuracy with tie calibration. Span level uses
corpus SoftF1 and exact-match F1. A noisier detector should lose on all
four, and the significance tests say whether the gap is real.
"""

import random

import numpy as np

from mbrdistill import Annotation, ErrorSpan, EvalItem, Severity, acc_eq_star, evaluate

rng = random.Random(0)
SYSTEMS = ["sysA", "sysB", "sysC", "sysD"]
N_SEG, LEN = 40, 30
# sysA is best, sysD worst: more gold errors per segment
error_rate = {"sysA": 0.5, "sysB": 1.0, "sysC": 1.8, "sysD": 2.6}


def random_errors(k):
    spans = []
    for _ in range(k):
        a = rng.randrange(LEN - 3)
        spans.append(ErrorSpan(a, a + rng.randint(1, 3), Severity.MAJOR if rng.random() < 0.4 else Severity.MINOR))
    return Annotation(tuple(spans))


def jitter(gold, p_drop):
    # a detector that misses some gold spans and sometimes invents one
    kept = [s for s in gold if rng.random() > p_drop]
    if rng.random() < p_drop:
        kept.extend(random_errors(1))
    return Annotation(tuple(kept))


items = []
for seg in range(N_SEG):
    for sys_id in SYSTEMS:
        gold = random_errors(np.random.default_rng([seg, len(sys_id), ord(sys_id[-1])]).poisson(error_rate[sys_id]))
        good = jitter(gold, 0.1)
        weak = jitter(gold, 0.5)
        items.append(EvalItem(sys_id, f"seg{seg:03d}", "en-de", LEN, good, gold, baseline=weak))

report = evaluate(items, permutations=500, resamples=500, seed=0, significance_permutations=100)
print(report.table("good detector"))

weak_report = evaluate([EvalItem(i.system_id, i.segment_id, i.direction, i.translation_len, i.baseline, i.gold)
                        for i in items], permutations=500, resamples=500)
print()
print(weak_report.table("weak detector"))

# tie calibration in isolation: metric scores 1.0 and 1.1 for a human tie
print("\nAcc_eq*([1.0, 1.1] vs [2, 2]) =", acc_eq_star([1.0, 1.1], [2.0, 2.0], [0, 0]))
