"""
MBR scoring of sampled error annotations
========================================

A model is asked several times where the errors are in one translation.
Each answer is a set of character spans. MBR picks the answer that agrees
most, on average, with all the others.
"""

import numpy as np

from mbrdistill import Annotation, CandidateSet, Segment, Severity, mbr_score, parse_output, soft_f1

MI, MA = Severity.MINOR, Severity.MAJOR

seg = Segment("demo-1", "sysA", "en", "de",
              "The cat sat on the mat.", "Die Katze sass auf dem Hut.")

# five raw outputs, the way an LLM would write them
raw = [
    'major: accuracy/mistranslation - "Hut"',
    'major: accuracy/mistranslation - "Hut"\nminor: fluency/spelling - "sass"',
    'minor: accuracy/mistranslation - "dem Hut"',
    "no-error",
    'major: accuracy/mistranslation - "Hut"',
]
candidates = []
for text in raw:
    ann, issues = parse_output(text, seg.translation)
    candidates.append(ann)
    print(f"{text!r:60} -> {[(s.start, s.end, s.severity.value) for s in ann]}")

# SoftF1 between two candidates: severity-weighted character overlap
print("\nSoftF1(cand0, cand2) =", round(soft_f1(candidates[0], candidates[2], len(seg.translation)), 4))

# pairwise utility matrix, the whole MBR computation in one picture
n = len(seg.translation)
U = np.array([[soft_f1(a, b, n) for b in candidates] for a in candidates])
print("\nutility matrix:\n", np.round(U, 3))

scored = mbr_score(CandidateSet(seg, tuple(candidates)))
print("\nMBR scores  :", np.round(scored.scores, 3))
print("row means   :", np.round(U.mean(axis=1), 3))
print("best (E+)   :", scored.best_index, [(s.start, s.end, s.severity.value) for s in scored.best])
print("worst (E-)  :", scored.worst_index, "no-error" if not scored.worst else scored.worst)

# the "no-error" answer is the outlier: it only agrees with other empty answers
assert scored.worst == Annotation()
