import json
import subprocess
import sys

import pytest

from mbrdistill.cli import main
from mbrdistill.core import Annotation, AnnotationRecord, Segment, Severity, read_jsonl, write_jsonl
from mbrdistill.generation import synthetic_segments

MI, MA = Severity.MINOR, Severity.MAJOR


@pytest.fixture
def segs(tmp_path):
    p = tmp_path / "segments.jsonl"
    write_jsonl(p, synthetic_segments(3, seed=1))
    return p


def run(*argv):
    return main([str(a) for a in argv])


def err_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_generate_counts(tmp_path, segs):
    out = tmp_path / "cand.jsonl"
    assert run("generate", "--segments", segs, "--out", out, "-C", 2, "--seed", 1) == 0
    rows = list(read_jsonl(out))
    assert len(rows) == 3 and all(len(r["candidates"]) == 2 for r in rows)


def test_generate_missing_file_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    assert run("generate", "--segments", missing, "--out", tmp_path / "o.jsonl") == 3
    err = err_json(capsys)
    assert err["error"] == "io" and str(missing) in err["message"] and err["path"] == str(missing)


def test_usage_errors(tmp_path, segs, capsys, monkeypatch):
    assert run("generate", "--segments", segs) == 2
    assert err_json(capsys)["error"] == "usage"
    assert run("frobnicate") == 2
    capsys.readouterr()
    assert run("generate", "--segments", segs, "--out", tmp_path / "o", "--ci") == 2
    assert "seed" in err_json(capsys)["message"]
    monkeypatch.setenv("MBRDISTILL_CI", "1")
    assert run("generate", "--segments", segs, "--out", tmp_path / "o") == 2
    assert run("generate", "--segments", segs, "--out", tmp_path / "o", "--seed", 0, "-C", 2) == 0


def test_malformed_input_is_validation_error(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"segment_id": "a"}\nnot json\n')
    assert run("generate", "--segments", bad, "--out", tmp_path / "o.jsonl") == 5
    err = err_json(capsys)
    assert err["error"] == "malformed_line" and err["line_no"] == 1


def test_http_backend_failure_exit_code(tmp_path, segs, capsys):
    # nothing listens on this port; transport errors are retried then reported
    argv = ["generate", "--segments", segs, "--out", tmp_path / "o.jsonl", "--backend", "http",
            "--endpoint", "http://127.0.0.1:9/v1/chat/completions", "--model", "m",
            "--max-retries", 0, "-C", 1]
    assert run(*argv) == 4
    assert err_json(capsys)["error"] == "backend"


def test_config_file_and_flag_override(tmp_path, segs):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"num_candidates": 3, "seed": 4}))
    out = tmp_path / "a.jsonl"
    assert run("generate", "--config", cfg, "--segments", segs, "--out", out) == 0
    assert all(len(r["candidates"]) == 3 for r in read_jsonl(out))
    assert run("generate", "--config", cfg, "-C", 5, "--segments", segs, "--out", out, "--no-resume") == 0
    assert all(len(r["candidates"]) == 5 for r in read_jsonl(out))


def test_score_singletons_and_variance(tmp_path, capsys):
    seg = Segment("s", "A", "en", "de", "x", "ein zwei drei")
    sp = tmp_path / "s.jsonl"
    write_jsonl(sp, [seg])
    cp = tmp_path / "c.jsonl"
    write_jsonl(cp, [{"segment_id": "s", "system_id": "A", "candidates": ['major: - "zwei"']}])
    assert run("score", "--segments", sp, "--candidates", cp, "--out", tmp_path / "o.jsonl") == 0
    assert next(read_jsonl(tmp_path / "o.jsonl"))["scores"] == [1.0]
    write_jsonl(cp, [{"segment_id": "s", "system_id": "A", "candidates": ['major: - "zwei"'] * 3}])
    summ = tmp_path / "summary.json"
    assert run("score", "--segments", sp, "--candidates", cp, "--out", tmp_path / "o.jsonl",
               "--variance", "--summary", summ) == 0
    assert json.loads(summ.read_text())["utility_variance"] == 0.0
    assert "utility variance" in capsys.readouterr().out


def test_score_matches_double_loop(tmp_path):
    from mbrdistill.gemba import parse_output
    from mbrdistill.utility import soft_f1
    from oracles import mbr_naive
    seg = Segment("s", "A", "en", "de", "x", "one two three four")
    texts = ['major: - "two"', 'minor: - "two three"', "no-error", 'major: - "two"', 'minor: - "four"']
    sp, cp, op = tmp_path / "s.jsonl", tmp_path / "c.jsonl", tmp_path / "o.jsonl"
    write_jsonl(sp, [seg])
    write_jsonl(cp, [{"segment_id": "s", "system_id": "A", "candidates": texts}])
    assert run("score", "--segments", sp, "--candidates", cp, "--out", op) == 0
    anns = [parse_output(t, seg.translation)[0] for t in texts]
    row = next(read_jsonl(op))
    assert row["scores"] == mbr_naive(anns, anns, soft_f1, len(seg.translation))
    assert (row["best_index"], row["worst_index"]) == (0, 2)


def test_score_misaligned_files(tmp_path, segs, capsys):
    cp = tmp_path / "c.jsonl"
    write_jsonl(cp, [{"segment_id": "zzz", "system_id": "A", "candidates": []}])
    assert run("score", "--segments", segs, "--candidates", cp, "--out", tmp_path / "o") == 5


def _pipeline(tmp_path, segs, variant="kto", seed=3, C=4):
    c, s, d = tmp_path / "cand.jsonl", tmp_path / "scored.jsonl", tmp_path / "data.jsonl"
    assert run("generate", "--segments", segs, "--out", c, "-C", C, "--seed", seed) == 0
    assert run("score", "--segments", segs, "--candidates", c, "--out", s, "--seed", seed) == 0
    assert run("build-dataset", "--segments", segs, "--scored", s, "--variant", variant, "--out", d,
               "--seed", seed) == 0
    return c, s, d


def test_build_dataset_and_manifest(tmp_path, segs):
    _, s, d = _pipeline(tmp_path, segs, "dpo")
    manifest = json.loads((tmp_path / "data.jsonl.manifest.json").read_text())
    assert manifest["variant"] == "dpo"
    rows = list(read_jsonl(d))
    assert manifest["counts"]["records"] == len(rows) == 3 - manifest["counts"]["skipped_equal"]
    assert all({"prompt", "chosen", "rejected"} <= set(r) for r in rows)


def test_loop_t1_equals_composed_commands(tmp_path, segs):
    comp = tmp_path / "composed"
    comp.mkdir()
    files = _pipeline(comp, segs, "kto", seed=5, C=6)
    work = tmp_path / "work"
    assert run("loop", "--segments", segs, "--workdir", work, "-T", 1, "-C", 6, "--seed", 5,
               "--variant", "kto") == 0
    it = work / "iter_1"
    for mine, theirs in zip(files, ("candidates.jsonl", "scored.jsonl", "dataset.jsonl")):
        assert mine.read_bytes() == (it / theirs).read_bytes()


def test_loop_mock_three_iterations(tmp_path):
    segs = tmp_path / "s.jsonl"
    write_jsonl(segs, synthetic_segments(40, seed=2))
    work = tmp_path / "w"
    assert run("loop", "--segments", segs, "--workdir", work, "-T", 3, "-C", 16, "--seed", 1,
               "--variant", "sft") == 0
    manifests = sorted(work.glob("iter_*/manifest.json"))
    assert len(manifests) == 3
    hist = json.loads((work / "summary.json").read_text())
    var = [h["utility_variance"] for h in hist]
    mean = [h["mean_utility"] for h in hist]
    assert var[0] >= var[1] >= var[2]
    assert mean[0] <= mean[1] <= mean[2]


def test_loop_http_halts_with_resume_token(tmp_path, segs, capsys):
    from test_generation import _Stub
    work = tmp_path / "w"
    with _Stub() as stub:
        argv = ["loop", "--segments", segs, "--workdir", work, "-T", 2, "-C", 2, "--seed", 0,
                "--backend", "http", "--endpoint", stub.url, "--model", "m"]
        assert run(*argv) == 0
        token = json.loads((work / "resume.json").read_text())
        assert token["next_iteration"] == 2
        assert (work / "iter_1" / "dataset.jsonl").exists()
        assert not (work / "iter_2").exists()
        assert "resume token" in capsys.readouterr().out
        assert run(*argv, "--start-iteration", 2) == 0
    assert (work / "iter_2" / "manifest.json").exists()


def _write_annotations(path, table):
    write_jsonl(path, [AnnotationRecord(seg, sys_id, ann) for (sys_id, seg), ann in table.items()])


def _eval_fixture(tmp_path):
    segs, gold = [], {}
    for d in ("en-de", "en-es"):
        for s in ("A", "B", "C"):
            for g in range(5):
                seg = Segment(f"{d}-{g}", s, "en", d[3:], "src", "uno dos tres cuatro cinco")
                segs.append(seg)
                k = (g * 7 + ord(s)) % 4
                gold[(s, seg.segment_id)] = Annotation.of(*[(i * 4, i * 4 + 3, MA if i % 2 else MI)
                                                            for i in range(k)])
    sp = tmp_path / "segs.jsonl"
    write_jsonl(sp, segs)
    gp = tmp_path / "gold.jsonl"
    _write_annotations(gp, gold)
    return sp, gp, gold


def test_evaluate_predictions_equal_gold(tmp_path, capsys):
    sp, gp, _ = _eval_fixture(tmp_path)
    out = tmp_path / "report.json"
    assert run("evaluate", "--segments", sp, "--predictions", gp, "--gold", gp, "--out", out,
               "--permutations", 100, "--resamples", 50) == 0
    rep = json.loads(out.read_text())
    assert (rep["spa"], rep["acc_eq_star"], rep["soft_f1"]) == (1.0, 1.0, 1.0)
    assert "SPA" in capsys.readouterr().out


def test_evaluate_with_baseline_and_missing(tmp_path, capsys):
    sp, gp, gold = _eval_fixture(tmp_path)
    bp = tmp_path / "base.jsonl"
    _write_annotations(bp, {k: Annotation() for k in gold})
    out = tmp_path / "r.json"
    assert run("evaluate", "--segments", sp, "--predictions", gp, "--gold", gp, "--baseline", bp,
               "--out", out, "--permutations", 50, "--resamples", 50,
               "--significance-permutations", 10) == 0
    assert len(json.loads(out.read_text())["significance"]) == 6
    partial = dict(list(gold.items())[1:])
    pp = tmp_path / "partial.jsonl"
    _write_annotations(pp, partial)
    capsys.readouterr()
    assert run("evaluate", "--segments", sp, "--predictions", pp, "--gold", gp) == 5
    err = err_json(capsys)
    assert err["error"] == "missing_entry" and err["segment_id"] == "en-de-0"


def test_verify_loss(tmp_path, capsys):
    cases = tmp_path / "cases.jsonl"
    write_jsonl(cases, [
        {"name": "sft", "loss": "sft", "logprobs": [-0.5, -1.5], "expected": 2.0},
        {"name": "dpo0", "loss": "dpo", "pos": {"policy": -1, "reference": -1},
         "neg": {"policy": -2, "reference": -2}, "expected": 0.6931471805599453},
        {"name": "dpo1", "loss": "dpo", "lambda": 0.5, "pos": {"policy": -1, "reference": -2},
         "neg": {"policy": -3, "reference": -2}, "expected": 0.313261687518, "tol": 1e-9},
        {"name": "v", "loss": "kto_value", "policy": -1, "reference": -3, "beta": 0.5, "z_ref": 1,
         "desirable": False, "expected": -0.5},
        {"name": "k", "loss": "kto", "items": [{"policy": -1, "reference": -1, "desirable": True}],
         "expected": 0.5},
    ])
    out = tmp_path / "res.jsonl"
    assert run("verify-loss", "--cases", cases, "--out", out) == 0
    assert all(r["ok"] for r in read_jsonl(out))
    write_jsonl(cases, [{"loss": "sft", "logprobs": [-1.0], "expected": 3.0}])
    assert run("verify-loss", "--cases", cases) == 5
    assert "MISMATCH" in capsys.readouterr().out


def test_subcommands_deterministic(tmp_path):
    segs = tmp_path / "s.jsonl"
    write_jsonl(segs, synthetic_segments(6, seed=9))
    outputs = []
    for r in ("a", "b"):
        d = tmp_path / r
        d.mkdir()
        files = list(_pipeline(d, segs, "kto", seed=11, C=5))
        assert run("loop", "--segments", segs, "--workdir", d / "w", "-T", 2, "-C", 5, "--seed", 11) == 0
        files += sorted((d / "w").rglob("*.json*"))
        outputs.append([f.read_bytes() for f in files])
    assert outputs[0] == outputs[1]


def test_module_entry_point(tmp_path, segs):
    proc = subprocess.run([sys.executable, "-m", "mbrdistill", "generate", "--segments", str(segs)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["error"] == "usage"
