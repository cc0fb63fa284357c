"""
Self-evolution with a mock annotator
====================================

The distillation loop samples candidates, picks MBR winners, and trains on
them. Here a seeded mock stands in for the model, and "training" just
shifts the mock toward the distilled targets. The spread of MBR scores
inside each candidate set (the utility variance) should shrink with every
round, because the model keeps agreeing with its own consensus.
"""

import tempfile
from pathlib import Path

from mbrdistill import (
    GenerationConfig,
    IterationState,
    MockGenerator,
    MockGeneratorSpec,
    adapt_mock,
    read_dataset,
    run_iteration,
    synthetic_segments,
    write_jsonl,
)

work = Path(tempfile.mkdtemp(prefix="mbr-loop-"))
segments = work / "segments.jsonl"
write_jsonl(segments, synthetic_segments(100, seed=7))

variant = "kto"
spec = MockGeneratorSpec(seed=1)
state = IterationState(1, 3, work, segments, seed=1, generation=GenerationConfig(num_candidates=32))

history = []
while True:
    t = state.iteration
    state_next, manifest = run_iteration(state, MockGenerator(spec), "soft_f1", variant)
    s, c = manifest["scoring"], manifest["counts"]
    history.append(s["utility_variance"])
    print(f"iteration {t}: mean utility {s['mean_utility']:.3f}  variance {s['utility_variance']:.2e}  "
          f"records {c['records']} ({c['undesirable']} undesirable)")
    if state_next.complete:
        break
    # the "training" step: reinforce whatever was distilled this round
    spec = adapt_mock(spec, read_dataset(state.dataset_path, segments, variant))
    state = state_next

print("\nvariance ratio first/last: %.1fx" % (history[0] / history[-1]))
print("artifacts in", work)
