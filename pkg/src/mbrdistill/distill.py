"""Pseudo-label dataset construction (SFT / DPO / KTO) and the per-iteration pipeline."""

from __future__ import annotations

import enum
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

from .core import Annotation, MalformedLine, Segment, dumps_record, read_jsonl
from .gemba import parse_output, render_annotation
from .generation import (
    GenerationConfig,
    GenerationFailure,
    Generator,
    derive_seed,
    generate_stream,
    render_prompt,
)
from .mbr import CandidateSet, ScoredCandidateSet, mbr_score, segment_variance
from .utility import UTILITIES, Utility, soft_f1

logger = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    SFT = "sft"
    DPO = "dpo"
    KTO = "kto"


class AlignmentError(ValueError):
    """Two streams that must be aligned by (segment_id, system_id) diverged."""


@dataclass(frozen=True)
class DistillRecord:
    variant: Variant
    segment: Segment
    iteration: int
    prompt: str
    target: Optional[str] = None
    chosen: Optional[str] = None
    rejected: Optional[str] = None
    completion: Optional[str] = None
    desirable: Optional[bool] = None

    def completions(self) -> list[tuple[str, bool]]:
        """(text, desirable) pairs carried by this record."""
        if self.variant is Variant.SFT:
            return [(self.target, True)]
        if self.variant is Variant.DPO:
            return [(self.chosen, True), (self.rejected, False)]
        return [(self.completion, bool(self.desirable))]

    def to_dict(self) -> dict:
        d: dict = {"prompt": self.prompt}
        if self.variant is Variant.SFT:
            d["target"] = self.target
        elif self.variant is Variant.DPO:
            d["chosen"] = self.chosen
            d["rejected"] = self.rejected
        else:
            d["completion"] = self.completion
            d["label"] = self.desirable
        d.update(
            segment_id=self.segment.segment_id,
            system_id=self.segment.system_id,
            iteration=self.iteration,
        )
        return d


@dataclass
class BuildReport:
    variant: Variant
    segments: int = 0
    records: int = 0
    skipped_equal: int = 0
    desirable: int = 0
    undesirable: int = 0

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "segments": self.segments,
            "records": self.records,
            "skipped_equal": self.skipped_equal,
            "desirable": self.desirable,
            "undesirable": self.undesirable,
        }


def records_for(
    scored: ScoredCandidateSet, variant: Variant, iteration: int = 1, template_id: str = "gemba_mqm_v1",
    prompt: Optional[str] = None,
) -> list[DistillRecord]:
    """Records one scored segment contributes to the dataset."""
    seg = scored.segment
    best, worst = scored.best, scored.worst
    prompt = render_prompt(seg, template_id) if prompt is None else prompt
    pos = render_annotation(best, seg.translation)
    same = best == worst
    if variant is Variant.SFT:
        return [DistillRecord(variant, seg, iteration, prompt, target=pos)]
    neg = None if same else render_annotation(worst, seg.translation)
    if variant is Variant.DPO:
        return [] if same else [DistillRecord(variant, seg, iteration, prompt, chosen=pos, rejected=neg)]
    out = [DistillRecord(variant, seg, iteration, prompt, completion=pos, desirable=True)]
    if not same:
        out.append(DistillRecord(variant, seg, iteration, prompt, completion=neg, desirable=False))
    return out


def build_dataset(
    scored: Iterable[ScoredCandidateSet],
    variant,
    iteration: int = 1,
    report: Optional[BuildReport] = None,
    template_id: str = "gemba_mqm_v1",
) -> Iterator[DistillRecord]:
    """Stream dataset records; pass a BuildReport to collect counts and DPO skips."""
    variant = Variant(variant)
    report = BuildReport(variant) if report is None else report
    for s in scored:
        recs = records_for(s, variant, iteration, template_id)
        report.segments += 1
        report.records += len(recs)
        if s.best == s.worst:
            report.skipped_equal += 1
            if variant is Variant.DPO:
                logger.debug("segment %s: best == worst, no DPO pair", s.segment.segment_id)
        for r in recs:
            if r.variant is Variant.KTO:
                if r.desirable:
                    report.desirable += 1
                else:
                    report.undesirable += 1
        yield from recs


# --- file formats -----------------------------------------------------------

def candidates_row(segment: Segment, texts: list[str]) -> dict:
    return {"segment_id": segment.segment_id, "system_id": segment.system_id, "candidates": list(texts)}


def scored_row(scored: ScoredCandidateSet, texts: list[str]) -> dict:
    row = candidates_row(scored.segment, texts)
    row["scores"] = list(scored.scores)
    row["best_index"] = scored.best_index
    row["worst_index"] = scored.worst_index
    return row


def _check_key(segment: Segment, row: dict, what: str):
    if (row.get("segment_id"), row.get("system_id")) != segment.key:
        raise AlignmentError(
            f"{what} row ({row.get('segment_id')!r}, {row.get('system_id')!r}) does not match "
            f"segment ({segment.segment_id!r}, {segment.system_id!r}); files must share order"
        )


def zip_segments(segments: Iterable[Segment], rows: Iterable[dict], what: str) -> Iterator[tuple[Segment, dict]]:
    seg_it, row_it = iter(segments), iter(rows)
    for row in row_it:
        seg = next(seg_it, None)
        if seg is None:
            raise AlignmentError(f"{what} file has more rows than the segments file")
        _check_key(seg, row, what)
        yield seg, row


def parse_candidates(segment: Segment, texts: list[str]) -> CandidateSet:
    anns = []
    for t in texts:
        ann, issues = parse_output(t, segment.translation)
        for issue in issues:
            logger.info("segment %s: %s on line %d", segment.segment_id, issue.kind, issue.line_no)
        anns.append(ann)
    return CandidateSet(segment, tuple(anns))


def scored_from_row(segment: Segment, row: dict) -> ScoredCandidateSet:
    cset = parse_candidates(segment, row["candidates"])
    scored = ScoredCandidateSet(cset, tuple(float(x) for x in row["scores"]))
    if "best_index" in row and (scored.best_index, scored.worst_index) != (row["best_index"], row["worst_index"]):
        raise ValueError(f"segment {segment.segment_id!r}: stored best/worst indices disagree with scores")
    return scored


def _recover_prefix(path: Path) -> list[tuple[str, str]]:
    """Keys of fully written rows; a torn trailing line is cut off."""
    if not path.exists():
        return []
    keys = []
    good_bytes = 0
    with path.open("rb") as f:
        for raw in f:
            if not raw.endswith(b"\n"):
                break
            try:
                obj = json.loads(raw.decode("utf-8"))
                keys.append((obj["segment_id"], obj["system_id"]))
            except (ValueError, KeyError, TypeError):
                break
            good_bytes += len(raw)
    with path.open("r+b") as f:
        f.truncate(good_bytes)
    return keys


def generate_file(
    segments_path,
    out_path,
    generator: Generator,
    config: GenerationConfig,
    master_seed: int,
    iteration: int = 1,
    resume: bool = True,
    max_in_flight: int = 1,
) -> int:
    """Sample candidates for every segment; rows already on disk are kept when resuming.

    Returns the number of segment rows in the finished file.
    """
    out_path = Path(out_path)
    done = _recover_prefix(out_path) if resume else []
    segments = read_jsonl(segments_path, Segment)
    for i, seg in enumerate(segments):
        if i >= len(done):
            rest = _chain([seg], segments)
            break
        if seg.key != tuple(done[i]):
            raise AlignmentError(f"existing candidates file {out_path} does not match segments order")
    else:
        rest = iter(())
    n = len(done)
    mode = "a" if done else "w"
    with out_path.open(mode, encoding="utf-8", newline="\n") as f:
        stream = generate_stream(
            generator, rest, config,
            lambda s: derive_seed(master_seed, iteration, s.segment_id, s.system_id),
            max_in_flight,
        )
        for seg, outputs in stream:
            f.write(dumps_record(candidates_row(seg, [o.text for o in outputs])) + "\n")
            f.flush()
            n += 1
    return n


def _chain(first, rest):
    yield from first
    yield from rest


@dataclass
class ScoreSummary:
    segments: int = 0
    mean_utility: float = 0.0
    best_utility: float = 0.0
    variance: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "segments": self.segments,
            "mean_utility": self.mean_utility,
            "mean_best_utility": self.best_utility,
            "utility_variance": self.variance,
        }


def score_file(segments_path, candidates_path, out_path, utility: Utility = soft_f1, variance: bool = False) -> ScoreSummary:
    """Score every candidate set; the summary carries corpus means (and the utility variance)."""
    summary = ScoreSummary()
    mean_sum = best_sum = var_sum = 0.0
    with Path(out_path).open("w", encoding="utf-8", newline="\n") as f:
        rows = read_jsonl(candidates_path)
        for seg, row in zip_segments(read_jsonl(segments_path, Segment), rows, "candidates"):
            scored = mbr_score(parse_candidates(seg, row["candidates"]), utility)
            f.write(dumps_record(scored_row(scored, row["candidates"])) + "\n")
            summary.segments += 1
            mean_sum += math.fsum(scored.scores) / len(scored.scores)
            best_sum += scored.scores[scored.best_index]
            if variance:
                var_sum += segment_variance(scored.scores, seg.segment_id)
    if summary.segments:
        summary.mean_utility = mean_sum / summary.segments
        summary.best_utility = best_sum / summary.segments
        if variance:
            summary.variance = var_sum / summary.segments
    elif variance:
        raise ValueError("no candidate sets to compute utility variance over")
    return summary


def iter_scored(segments_path, scored_path) -> Iterator[ScoredCandidateSet]:
    for seg, row in zip_segments(read_jsonl(segments_path, Segment), read_jsonl(scored_path), "scored"):
        yield scored_from_row(seg, row)


def build_file(
    segments_path, scored_path, out_path, variant, iteration: int = 1, template_id: str = "gemba_mqm_v1"
) -> BuildReport:
    report = BuildReport(Variant(variant))
    with Path(out_path).open("w", encoding="utf-8", newline="\n") as f:
        for rec in build_dataset(iter_scored(segments_path, scored_path), variant, iteration, report, template_id):
            f.write(dumps_record(rec) + "\n")
    return report


def read_dataset(path, segments_path, variant) -> Iterator[DistillRecord]:
    """Reload an emitted dataset, reattaching segments by key (used to adapt the mock)."""
    variant = Variant(variant)
    segs = {s.key: s for s in read_jsonl(segments_path, Segment)}
    for row in read_jsonl(path):
        seg = segs[(row["segment_id"], row["system_id"])]
        yield DistillRecord(
            variant, seg, int(row.get("iteration", 1)), row["prompt"],
            target=row.get("target"), chosen=row.get("chosen"), rejected=row.get("rejected"),
            completion=row.get("completion"), desirable=row.get("label"),
        )


# --- iteration bookkeeping --------------------------------------------------

@dataclass
class IterationState:
    """Where iteration ``iteration`` of the distillation loop reads and writes."""

    iteration: int
    total_iterations: int
    workdir: Path
    segments_path: Path
    seed: int
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    complete: bool = False

    def __post_init__(self):
        self.workdir = Path(self.workdir)
        self.segments_path = Path(self.segments_path)
        if not 1 <= self.iteration <= self.total_iterations:
            raise ValueError(f"iteration {self.iteration} outside [1, {self.total_iterations}]")

    @property
    def iter_dir(self) -> Path:
        return self.workdir / f"iter_{self.iteration}"

    @property
    def candidates_path(self) -> Path:
        return self.iter_dir / "candidates.jsonl"

    @property
    def scored_path(self) -> Path:
        return self.iter_dir / "scored.jsonl"

    @property
    def dataset_path(self) -> Path:
        return self.iter_dir / "dataset.jsonl"

    @property
    def manifest_path(self) -> Path:
        return self.iter_dir / "manifest.json"

    def next(self) -> "IterationState":
        return IterationState(
            self.iteration + 1, self.total_iterations, self.workdir, self.segments_path, self.seed, self.generation
        )


def write_manifest(path, manifest: dict):
    Path(path).write_text(json.dumps(manifest, ensure_ascii=False, indent=2, sort_keys=True) + "\n", "utf-8")


def _rel(path: Path, start: Path) -> str:
    return Path(os.path.relpath(path, start)).as_posix()


def run_iteration(
    state: IterationState,
    generator: Generator,
    utility="soft_f1",
    variant="sft",
    max_in_flight: int = 1,
) -> tuple[IterationState, dict]:
    """Generate, score and distill one iteration, then write its manifest.

    The manifest is the handoff to an external trainer; the returned state
    points at the next iteration (or is marked complete after the last).
    """
    utility_name = utility if isinstance(utility, str) else getattr(utility, "__name__", "custom")
    utility_fn = UTILITIES[utility] if isinstance(utility, str) else utility
    variant = Variant(variant)
    state.iter_dir.mkdir(parents=True, exist_ok=True)
    generate_file(
        state.segments_path, state.candidates_path, generator, state.generation, state.seed,
        state.iteration, resume=True, max_in_flight=max_in_flight,
    )
    summary = score_file(state.segments_path, state.candidates_path, state.scored_path, utility_fn, variance=True)
    report = build_file(
        state.segments_path, state.scored_path, state.dataset_path, variant, state.iteration,
        state.generation.prompt_template_id,
    )
    base = state.iter_dir
    manifest = {
        "iteration": state.iteration,
        "total_iterations": state.total_iterations,
        "seed": state.seed,
        "variant": variant.value,
        "utility": utility_name,
        "generator_config": {"generation": state.generation.to_dict(), **_describe(generator)},
        "counts": {**report.to_dict(), "candidates_per_segment": state.generation.num_candidates},
        "scoring": summary.to_dict(),
        "file_paths": {
            "segments": _rel(state.segments_path, base),
            "candidates": _rel(state.candidates_path, base),
            "scored": _rel(state.scored_path, base),
            "dataset": _rel(state.dataset_path, base),
        },
    }
    write_manifest(state.manifest_path, manifest)
    if state.iteration == state.total_iterations:
        state.complete = True
        return state, manifest
    return state.next(), manifest


def _describe(generator) -> dict:
    desc = generator.describe() if hasattr(generator, "describe") else {"backend": type(generator).__name__}
    if desc.get("backend") == "mock":
        # The learned table can be large; the manifest records only the knobs.
        spec = dict(desc["spec"])
        spec["learned_segments"] = len(spec.pop("learned", {}))
        desc = {"backend": "mock", "spec": spec}
    return desc


def load_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as e:
        raise MalformedLine(e.lineno, "", e.msg, path) from None
