"""Command-line entry point: generate, score, build-dataset, loop, evaluate, verify-loss."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional

from .core import AnnotationRecord, InvalidSpan, MalformedLine, Segment, read_jsonl, write_jsonl
from .distill import (
    AlignmentError,
    IterationState,
    Variant,
    build_file,
    generate_file,
    read_dataset,
    run_iteration,
    score_file,
    write_manifest,
)
from .generation import (
    DEFAULT_API_KEY_ENV,
    GenerationConfig,
    GenerationFailure,
    HttpBackend,
    MockGenerator,
    MockGeneratorSpec,
    adapt_mock,
)
from .losses import KtoConfig, PolicyLogProbs, dpo_loss, kto_loss, kto_value, sft_loss
from .metaeval import EvalItem, MissingEntry, evaluate
from .utility import UTILITIES

log = logging.getLogger("mbrdistill")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_BACKEND, EXIT_VALIDATION = 0, 2, 3, 4, 5

DEFAULTS = {
    "backend": "mock",
    "num_candidates": 256,
    "top_k": 10,
    "temperature": 2.0,
    "max_tokens": 512,
    "request_timeout": 60.0,
    "max_retries": 5,
    "max_concurrent_requests": 8,
    "prompt_template_id": "gemba_mqm_v1",
    "api_key_env": DEFAULT_API_KEY_ENV,
    "max_in_flight": 1,
    "iteration": 1,
    "iterations": 3,
    "utility": "soft_f1",
    "variant": "sft",
    "permutations": 1000,
    "resamples": 1000,
    "significance_permutations": 200,
    "seed": 0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_generation_flags(p):
    g = p.add_argument_group("generation")
    g.add_argument("--backend", choices=["mock", "http"])
    g.add_argument("--num-candidates", "-C", dest="num_candidates", type=int)
    g.add_argument("--top-k", dest="top_k", type=int)
    g.add_argument("--temperature", type=float)
    g.add_argument("--max-tokens", dest="max_tokens", type=int)
    g.add_argument("--request-timeout", dest="request_timeout", type=float)
    g.add_argument("--max-retries", dest="max_retries", type=int)
    g.add_argument("--max-concurrent-requests", dest="max_concurrent_requests", type=int)
    g.add_argument("--max-in-flight", dest="max_in_flight", type=int, help="segments generated concurrently")
    g.add_argument("--prompt-template", dest="prompt_template_id")
    g.add_argument("--endpoint", help="chat-completions URL (http backend)")
    g.add_argument("--model", help="model name sent to the endpoint")
    g.add_argument("--api-key-env", dest="api_key_env", help="environment variable holding the API key")
    g.add_argument("--mock-spec", dest="mock_spec", help="JSON file with mock generator settings")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--ci", action="store_true", default=None, help="require an explicit --seed")
    common.add_argument("-v", "--verbose", action="store_true", default=None)

    parser = _Parser(prog="mbrdistill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="sample candidate annotations per segment")
    p.add_argument("--segments")
    p.add_argument("--out")
    p.add_argument("--iteration", type=int)
    p.add_argument("--no-resume", dest="resume", action="store_false", default=None)
    _add_generation_flags(p)

    p = sub.add_parser("score", parents=[common], help="MBR-score candidate sets")
    p.add_argument("--segments")
    p.add_argument("--candidates")
    p.add_argument("--out")
    p.add_argument("--utility", choices=sorted(UTILITIES))
    p.add_argument("--variance", action="store_true", default=None, help="also report the utility variance")
    p.add_argument("--summary", help="write the scoring summary JSON here")

    p = sub.add_parser("build-dataset", parents=[common], help="emit an SFT/DPO/KTO dataset")
    p.add_argument("--segments")
    p.add_argument("--scored")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.add_argument("--iteration", type=int)
    p.add_argument("--prompt-template", dest="prompt_template_id")

    p = sub.add_parser("loop", parents=[common], help="run the iterative distillation loop")
    p.add_argument("--segments")
    p.add_argument("--workdir")
    p.add_argument("--iterations", "-T", dest="iterations", type=int)
    p.add_argument("--start-iteration", dest="start_iteration", type=int,
                   help="resume at this iteration (http mode after external training)")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--utility", choices=sorted(UTILITIES))
    _add_generation_flags(p)

    p = sub.add_parser("evaluate", parents=[common], help="meta-evaluate predictions against gold")
    p.add_argument("--segments")
    p.add_argument("--predictions")
    p.add_argument("--gold")
    p.add_argument("--baseline", help="annotations to test the predictions against")
    p.add_argument("--permutations", type=int)
    p.add_argument("--resamples", type=int)
    p.add_argument("--significance-permutations", dest="significance_permutations", type=int)
    p.add_argument("--out", help="write the JSON report here")

    p = sub.add_parser("verify-loss", parents=[common], help="evaluate loss cases from JSONL")
    p.add_argument("--cases")
    p.add_argument("--out")
    return parser


REQUIRED = {
    "generate": ["segments", "out"],
    "score": ["segments", "candidates", "out"],
    "build-dataset": ["segments", "scored", "out"],
    "loop": ["segments", "workdir"],
    "evaluate": ["segments", "predictions", "gold"],
    "verify-loss": ["cases"],
}


def resolve_args(argv=None) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text("utf-8"))
        except json.JSONDecodeError as e:
            raise ValueError(f"config {args.config}: {e}") from None
        if not isinstance(cfg, dict):
            raise ValueError(f"config {args.config} must be a JSON object")
    seed_given = args.seed is not None or "seed" in cfg
    for key, value in cfg.items():
        key = key.replace("-", "_")
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    for key, value in DEFAULTS.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    if (args.ci or os.environ.get("MBRDISTILL_CI")) and not seed_given:
        raise UsageError("--seed is mandatory in CI mode")
    missing = [k for k in REQUIRED[args.command] if not getattr(args, k, None)]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return args


def generation_config(args) -> GenerationConfig:
    return GenerationConfig(
        num_candidates=args.num_candidates,
        top_k=args.top_k,
        temperature=args.temperature,
        max_tokens=args.max_tokens,
        request_timeout=args.request_timeout,
        max_retries=args.max_retries,
        max_concurrent_requests=args.max_concurrent_requests,
        prompt_template_id=args.prompt_template_id,
    )


def mock_spec(args) -> MockGeneratorSpec:
    if getattr(args, "mock_spec", None):
        spec = args.mock_spec
        if isinstance(spec, str):
            spec = json.loads(Path(spec).read_text("utf-8"))
        return MockGeneratorSpec.from_dict({"seed": args.seed, **spec})
    return MockGeneratorSpec(seed=args.seed)


def make_generator(args):
    if args.backend == "mock":
        return MockGenerator(mock_spec(args))
    if not args.endpoint or not args.model:
        raise UsageError("http backend needs --endpoint and --model")
    return HttpBackend(args.endpoint, args.model, api_key_env=args.api_key_env)


def _check_exists(*paths):
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(2, "No such file or directory", str(p))


def cmd_generate(args) -> int:
    _check_exists(args.segments)
    gen = make_generator(args)
    n = generate_file(
        args.segments, args.out, gen, generation_config(args), args.seed, args.iteration,
        resume=args.resume is not False, max_in_flight=args.max_in_flight,
    )
    print(f"wrote {n} candidate sets ({args.num_candidates} candidates each) to {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    _check_exists(args.segments, args.candidates)
    summary = score_file(args.segments, args.candidates, args.out, UTILITIES[args.utility], bool(args.variance))
    print(f"scored {summary.segments} candidate sets -> {args.out}")
    print(f"mean MBR utility: {summary.mean_utility:.6f}  mean best utility: {summary.best_utility:.6f}")
    if args.variance:
        print(f"utility variance: {summary.variance:.6e}")
    if args.summary:
        Path(args.summary).write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n", "utf-8")
    return EXIT_OK


def cmd_build(args) -> int:
    _check_exists(args.segments, args.scored)
    report = build_file(args.segments, args.scored, args.out, args.variant, args.iteration, args.prompt_template_id)
    manifest_path = Path(args.manifest) if args.manifest else Path(str(args.out) + ".manifest.json")
    base = manifest_path.parent
    manifest = {
        "iteration": args.iteration,
        "seed": args.seed,
        "variant": report.variant.value,
        "generator_config": None,
        "counts": report.to_dict(),
        "file_paths": {
            "segments": os.path.relpath(args.segments, base),
            "scored": os.path.relpath(args.scored, base),
            "dataset": os.path.relpath(args.out, base),
        },
    }
    write_manifest(manifest_path, manifest)
    print(
        f"{report.variant.value}: {report.records} records from {report.segments} segments "
        f"({report.skipped_equal} with best == worst) -> {args.out}"
    )
    return EXIT_OK


def _spec_for_iteration(args, workdir: Path, t: int) -> MockGeneratorSpec:
    spec = mock_spec(args)
    for k in range(1, t):
        prev = workdir / f"iter_{k}"
        spec = adapt_mock(spec, read_dataset(prev / "dataset.jsonl", args.segments, args.variant))
    return spec


def cmd_loop(args) -> int:
    _check_exists(args.segments)
    if args.iterations < 1:
        raise UsageError("--iterations must be >= 1")
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    start = args.start_iteration or 1
    state = IterationState(start, args.iterations, workdir, Path(args.segments), args.seed, generation_config(args))
    history = []
    if args.backend == "mock":
        spec = _spec_for_iteration(args, workdir, start)
    while True:
        t = state.iteration
        if args.backend == "mock":
            gen = MockGenerator(spec)
            (state.iter_dir).mkdir(parents=True, exist_ok=True)
            (state.iter_dir / "mock_spec.json").write_text(
                json.dumps(spec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n", "utf-8"
            )
        else:
            gen = make_generator(args)
        cur = state
        state, manifest = run_iteration(cur, gen, args.utility, args.variant, args.max_in_flight)
        s = manifest["scoring"]
        history.append({"iteration": t, **s, "records": manifest["counts"]["records"]})
        print(
            f"iteration {t}: mean utility {s['mean_utility']:.4f}, utility variance {s['utility_variance']:.3e}, "
            f"{manifest['counts']['records']} {args.variant} records -> {cur.dataset_path}"
        )
        if cur.iteration == args.iterations:
            break
        if args.backend == "http":
            token = {
                "next_iteration": t + 1,
                "workdir": str(workdir),
                "dataset": str(cur.dataset_path),
                "manifest": str(cur.manifest_path),
            }
            (workdir / "resume.json").write_text(json.dumps(token, indent=2, sort_keys=True) + "\n", "utf-8")
            print("train on the dataset above, point --endpoint at the new model, then resume with "
                  f"--start-iteration {t + 1}")
            print("resume token: " + json.dumps(token, sort_keys=True))
            return EXIT_OK
        spec = adapt_mock(spec, read_dataset(cur.dataset_path, args.segments, args.variant))
    if start == 1:
        (workdir / "summary.json").write_text(json.dumps(history, indent=2, sort_keys=True) + "\n", "utf-8")
    return EXIT_OK


def _load_annotations(path) -> dict:
    out = {}
    for rec in read_jsonl(path, AnnotationRecord):
        if rec.key in out:
            raise ValueError(f"{path}: duplicate record for {rec.key}")
        out[rec.key] = rec.annotation
    return out


def cmd_evaluate(args) -> int:
    paths = [args.segments, args.predictions, args.gold] + ([args.baseline] if args.baseline else [])
    _check_exists(*paths)
    preds = _load_annotations(args.predictions)
    gold = _load_annotations(args.gold)
    base = _load_annotations(args.baseline) if args.baseline else None
    items = []
    for seg in read_jsonl(args.segments, Segment):
        for name, table in (("predictions", preds), ("gold", gold), ("baseline", base)):
            if table is not None and seg.key not in table:
                raise MissingEntry(seg.system_id, seg.segment_id)
        n = len(seg.translation)
        for table in (preds, gold, base):
            if table is not None:
                table[seg.key].check(n)
        items.append(EvalItem(
            seg.system_id, seg.segment_id, seg.direction, n, preds[seg.key], gold[seg.key],
            base[seg.key] if base is not None else None,
        ))
    report = evaluate(items, args.permutations, args.resamples, args.seed, args.significance_permutations)
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", "utf-8")
    print(report.table())
    return EXIT_OK


def _logprobs(d) -> PolicyLogProbs:
    return PolicyLogProbs(float(d["policy"]), float(d["reference"]))


def loss_case(case: dict) -> float:
    kind = case["loss"]
    if kind == "sft":
        return sft_loss([float(x) for x in case["logprobs"]])
    if kind == "dpo":
        return dpo_loss(_logprobs(case["pos"]), _logprobs(case["neg"]), float(case.get("lambda", 0.5)))
    cfg = KtoConfig(
        beta=float(case.get("beta", 0.5)),
        w_desirable=float(case.get("w_desirable", 1.0)),
        w_undesirable=float(case.get("w_undesirable", 1.0)),
        z_ref=float(case.get("z_ref", 0.0)),
    )
    if kind == "kto_value":
        return kto_value(_logprobs(case), cfg, bool(case["desirable"]))
    if kind == "kto":
        return kto_loss([(_logprobs(i), bool(i["desirable"])) for i in case["items"]], cfg)
    raise ValueError(f"unknown loss kind {kind!r}")


def cmd_verify_loss(args) -> int:
    _check_exists(args.cases)
    results = []
    failed = 0
    for case in read_jsonl(args.cases):
        value = loss_case(case)
        row = {**case, "value": value}
        if "expected" in case:
            tol = float(case.get("tol", 1e-9))
            row["ok"] = math.isclose(value, float(case["expected"]), rel_tol=0.0, abs_tol=tol)
            failed += not row["ok"]
        results.append(row)
        status = "" if "ok" not in row else ("  ok" if row["ok"] else "  MISMATCH")
        print(f"{case.get('name', case['loss'])}: {value:.12g}{status}")
    if args.out:
        write_jsonl(args.out, results)
    if failed:
        print(f"{failed} case(s) outside tolerance")
        return EXIT_VALIDATION
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "score": cmd_score,
    "build-dataset": cmd_build,
    "loop": cmd_loop,
    "evaluate": cmd_evaluate,
    "verify-loss": cmd_verify_loss,
}


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, ensure_ascii=False) + "\n")
    return code


def main(argv: Optional[list] = None) -> int:
    try:
        args = resolve_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", str(e))
    except GenerationFailure as e:
        return _fail(EXIT_BACKEND, "backend", str(e), segment_id=e.segment_id)
    except MalformedLine as e:
        return _fail(EXIT_VALIDATION, "malformed_line", str(e), path=e.path, line_no=e.line_no)
    except OSError as e:
        return _fail(EXIT_IO, "io", str(e), path=getattr(e, "filename", None))
    except MissingEntry as e:
        return _fail(EXIT_VALIDATION, "missing_entry", str(e), system_id=e.system, segment_id=e.segment)
    except (MissingEntry, InvalidSpan, AlignmentError, ValueError, KeyError) as e:
        return _fail(EXIT_VALIDATION, "validation", str(e))


if __name__ == "__main__":
    sys.exit(main())
