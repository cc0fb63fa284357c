import pytest
from hypothesis import given, settings, strategies as st

from mbrdistill.core import Annotation, Severity
from mbrdistill.gemba import (
    AMBIGUOUS_QUOTE,
    BAD_SEVERITY,
    MALFORMED_LINE,
    UNMATCHED_QUOTE,
    RawModelOutput,
    parse_output,
    render_annotation,
)
from strategies import translation_and_annotation

MI, MA = Severity.MINOR, Severity.MAJOR


def test_parse_simple_quote():
    ann, issues = parse_output('major: accuracy/mistranslation - "cat"', "the cat sat")
    assert issues == []
    assert ann == Annotation.of((4, 7, MA, "accuracy/mistranslation"))
    assert ann.spans[0].category == "accuracy/mistranslation"


def test_parse_no_error():
    assert parse_output("no-error", "anything at all") == (Annotation(), [])


def test_parse_context_disambiguates():
    ann, issues = parse_output('minor: fluency - "a" (context: "sat a mat")', "a cat sat a mat")
    assert issues == []
    assert [(s.start, s.end) for s in ann.spans] == [(10, 11)]


def test_parse_unmatched_quote():
    ann, issues = parse_output('major: - "zzz"', "the cat")
    assert ann == Annotation()
    assert [i.kind for i in issues] == [UNMATCHED_QUOTE]


def test_parse_raw_model_output():
    raw = RawModelOutput("s1", "sys", 'minor: style - "sat"')
    ann, _ = parse_output(raw, "the cat sat")
    assert ann == Annotation.of((8, 11, MI))


def test_parse_multiline_and_aliases(caplog):
    text = 'Critical: accuracy - "cat"\nMINOR: fluency - "sat"\r\n\nneutral: x - "the"\nblah\n'
    ann, issues = parse_output(text, "the cat sat")
    assert ann == Annotation.of((4, 7, MA), (8, 11, MI))
    assert sorted(i.kind for i in issues) == [BAD_SEVERITY, MALFORMED_LINE]
    assert "critical" in caplog.text


def test_parse_ambiguous_without_context_takes_first_word():
    ann, issues = parse_output('minor: - "a"', "cat a a")
    assert [(s.start, s.end) for s in ann.spans] == [(4, 5)]
    assert [i.kind for i in issues] == [AMBIGUOUS_QUOTE]


def test_parse_missing_context_falls_back():
    ann, issues = parse_output('minor: - "cat" (context: "dog cat")', "the cat sat")
    assert ann == Annotation.of((4, 7, MI))
    assert [i.kind for i in issues] == [AMBIGUOUS_QUOTE]


def test_parse_occurrence_clause():
    ann, issues = parse_output('major: - "a" (occurrence: 3)', "a a a")
    assert ann == Annotation.of((4, 5, MA))
    assert issues == []
    _, issues = parse_output('major: - "a" (occurrence: 9)', "a a a")
    assert [i.kind for i in issues] == [UNMATCHED_QUOTE]


def test_parse_unicode_offsets_are_code_points():
    ann, _ = parse_output('major: - "座った"', "猫が座った")
    assert [(s.start, s.end) for s in ann.spans] == [(2, 5)]


def test_render_empty():
    assert render_annotation(Annotation(), "whatever") == "no-error"


def test_render_unique_has_no_context():
    text = render_annotation(Annotation.of((4, 7, MA)), "the cat sat")
    assert text == 'major: - "cat"'


def test_render_second_occurrence_uses_context():
    t = "a cat sat a mat"
    text = render_annotation(Annotation.of((10, 11, MI, "fluency")), t)
    assert text.count("\n") == 0
    assert "(context: " in text
    assert parse_output(text, t) == (Annotation.of((10, 11, MI, "fluency")), [])


def test_render_escapes_quotes_and_newlines():
    t = 'he said "hi"\nand left'
    a = Annotation.of((8, 15, MA))
    text = render_annotation(a, t)
    assert "\n" not in text
    ann, issues = parse_output(text, t)
    assert issues == [] and ann.spans == a.spans


@given(translation_and_annotation(max_len=40, max_spans=5))
@settings(max_examples=400)
def test_round_trip_random_unicode(ta):
    t, a = ta
    ann, issues = parse_output(render_annotation(a, t), t)
    assert issues == []
    assert ann.spans == tuple(sorted(set(a.spans), key=lambda s: s.sort_key()))


@given(translation_and_annotation(alphabet="ab ", max_len=25, max_spans=4))
@settings(max_examples=400)
def test_round_trip_repetitive_text(ta):
    t, a = ta
    ann, issues = parse_output(render_annotation(a, t), t)
    assert issues == [] and ann == a


@given(st.text(max_size=200), st.text(max_size=40))
@settings(max_examples=500)
def test_parse_is_total(noise, translation):
    ann, issues = parse_output(noise, translation)
    assert isinstance(ann, Annotation)
    ann.check(len(translation))


@given(st.text(alphabet='majorinc: -"()\\context ab\n', max_size=80), st.text(alphabet="ab c", max_size=20))
@settings(max_examples=500)
def test_parse_grammar_noise_resolves_exact_quotes(noise, translation):
    ann, issues = parse_output(noise, translation)
    for s in ann.spans:
        assert 0 <= s.start < s.end <= len(translation)
    assert all(i.kind in {UNMATCHED_QUOTE, AMBIGUOUS_QUOTE, BAD_SEVERITY, MALFORMED_LINE} for i in issues)


def test_resolved_spans_equal_quote():
    t = "x yy x yy"
    ann, _ = parse_output('minor: - "yy"\nmajor: - "x" (context: "yy x")', t)
    for s in ann.spans:
        assert t[s.start:s.end] in {"yy", "x"}
