"""Iterative MBR distillation for MT error span detection."""

from .core import (
    Annotation,
    AnnotationRecord,
    ErrorSpan,
    InvalidSpan,
    MalformedLine,
    Segment,
    Severity,
    canonicalize,
    read_jsonl,
    segment_score,
    write_jsonl,
)
from .distill import (
    BuildReport,
    DistillRecord,
    IterationState,
    Variant,
    build_dataset,
    load_manifest,
    read_dataset,
    run_iteration,
)
from .gemba import ParseIssue, RawModelOutput, parse_output, render_annotation
from .generation import (
    GenerationConfig,
    GenerationFailure,
    HttpBackend,
    MockGenerator,
    MockGeneratorSpec,
    adapt_mock,
    generate_candidates,
    synthetic_segments,
)
from .losses import KtoConfig, PolicyLogProbs, dpo_loss, kto_loss, kto_value, sft_loss
from .mbr import CandidateSet, ScoredCandidateSet, mbr_score, utility_variance
from .metaeval import (
    EvalItem,
    MetricReport,
    ScoreMatrix,
    acc_eq_star,
    evaluate,
    paired_bootstrap,
    perm_both_test,
    spa,
    system_scores,
)
from .utility import corpus_aggregate, exact_f1, soft_f1

__version__ = "0.1.0"
