"""GEMBA-MQM style error-span text: parsing model completions and rendering targets.

One error per line::

    <severity>: <category> - "<quote>"
    <severity>: <category> - "<quote>" (context: "<context>")
    <severity>: <category> - "<quote>" (occurrence: <k>)

and the single token ``no-error`` for an empty annotation. Quotes and
contexts are JSON string literals, so any translation substring survives
the round trip. The category may be empty.

A quote is located inside its context (first occurrence of the context in
the translation) or, without one, inside the whole translation. Among the
occurrences in that region the first one that does not cut through a word
wins; if every occurrence cuts a word, the first occurrence wins. The
``occurrence`` clause names the k-th raw occurrence (1-based) and is only
emitted when no context window can single out the span.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from typing import Optional

from .core import Annotation, ErrorSpan, Severity, canonicalize

logger = logging.getLogger(__name__)

NO_ERROR = "no-error"
MAX_CONTEXT_WORDS = 10

SEVERITY_ALIASES = {
    "minor": Severity.MINOR,
    "major": Severity.MAJOR,
    "critical": Severity.MAJOR,
}

_JSON_STR = r'"(?:[^"\\]|\\.)*"'
_LINE_RE = re.compile(
    r"^\s*(?P<sev>[^\s:\"]+)\s*:\s*(?P<cat>[^\"]*?)\s*-\s*(?P<quote>" + _JSON_STR + r")"
    r"(?:\s*\(\s*(?:context:\s*(?P<ctx>" + _JSON_STR + r")|occurrence:\s*(?P<occ>\d{1,9}))\s*\))?"
    r"\s*$",
    re.DOTALL,
)

# Issue kinds.
UNMATCHED_QUOTE = "UnmatchedQuote"
AMBIGUOUS_QUOTE = "AmbiguousQuote"
BAD_SEVERITY = "BadSeverityLabel"
MALFORMED_LINE = "MalformedLine"


@dataclass(frozen=True)
class RawModelOutput:
    segment_id: str
    system_id: str
    text: str


@dataclass(frozen=True)
class SpanMention:
    severity: Severity
    quote: str
    category: Optional[str] = None
    context: Optional[str] = None
    occurrence: Optional[int] = None


@dataclass(frozen=True)
class ParseIssue:
    kind: str
    line_no: int
    line: str
    detail: str = ""


def _decode_literal(lit: str) -> str:
    try:
        value = json.loads(lit)
        if isinstance(value, str):
            return value
    except (ValueError, RecursionError):
        pass
    return lit[1:-1]


def _occurrences(text: str, quote: str, lo: int = 0, hi: Optional[int] = None) -> list[int]:
    """Start offsets of every (possibly overlapping) occurrence of quote in text[lo:hi]."""
    hi = len(text) if hi is None else hi
    out = []
    i = text.find(quote, lo, hi)
    while i != -1:
        out.append(i)
        i = text.find(quote, i + 1, hi)
    return out


def _cuts_word(text: str, start: int, end: int) -> bool:
    if start > 0 and text[start - 1].isalnum() and text[start].isalnum():
        return True
    if end < len(text) and text[end].isalnum() and text[end - 1].isalnum():
        return True
    return False


def _pick(text: str, starts: list[int], length: int) -> int:
    for s in starts:
        if not _cuts_word(text, s, s + length):
            return s
    return starts[0]


def resolve_quote(
    translation: str,
    quote: str,
    context: Optional[str] = None,
    occurrence: Optional[int] = None,
) -> tuple[Optional[int], Optional[str]]:
    """Locate a quoted span. Returns (start or None, issue kind or None)."""
    if not quote:
        return None, UNMATCHED_QUOTE
    if occurrence is not None:
        starts = _occurrences(translation, quote)
        if 1 <= occurrence <= len(starts):
            return starts[occurrence - 1], None
        return None, UNMATCHED_QUOTE
    if context:
        c = translation.find(context)
        if c != -1:
            starts = _occurrences(translation, quote, c, c + len(context))
            if starts:
                issue = AMBIGUOUS_QUOTE if translation.find(context, c + 1) != -1 else None
                return _pick(translation, starts, len(quote)), issue
        # Context missing or not containing the quote: fall back to the whole translation.
        starts = _occurrences(translation, quote)
        if not starts:
            return None, UNMATCHED_QUOTE
        return _pick(translation, starts, len(quote)), AMBIGUOUS_QUOTE
    starts = _occurrences(translation, quote)
    if not starts:
        return None, UNMATCHED_QUOTE
    return _pick(translation, starts, len(quote)), (AMBIGUOUS_QUOTE if len(starts) > 1 else None)


def parse_mentions(text: str) -> tuple[list[tuple[int, str, Optional[SpanMention]]], list[ParseIssue]]:
    """Split completion text into per-line mentions; lines that do not parse become issues."""
    mentions = []
    issues = []
    for line_no, line in enumerate(text.split("\n"), 1):
        if line.endswith("\r"):
            line = line[:-1]
        stripped = line.strip()
        if not stripped or stripped.lower() == NO_ERROR:
            continue
        m = _LINE_RE.match(line)
        if m is None:
            issues.append(ParseIssue(MALFORMED_LINE, line_no, line))
            continue
        label = m.group("sev").lower()
        severity = SEVERITY_ALIASES.get(label)
        if severity is None:
            issues.append(ParseIssue(BAD_SEVERITY, line_no, line, m.group("sev")))
            continue
        if label == "critical":
            logger.warning("line %d: severity 'critical' mapped to major", line_no)
        quote = _decode_literal(m.group("quote"))
        ctx = _decode_literal(m.group("ctx")) if m.group("ctx") is not None else None
        occ = int(m.group("occ")) if m.group("occ") is not None else None
        category = m.group("cat").strip() or None
        mentions.append((line_no, line, SpanMention(severity, quote, category, ctx, occ)))
    return mentions, issues


def parse_output(raw, translation: str) -> tuple[Annotation, list[ParseIssue]]:
    """Parse a completion (``RawModelOutput`` or plain string) into a canonical Annotation.

    Never raises on content: anything that cannot be resolved is reported as
    a ParseIssue and left out of the annotation.
    """
    text = raw.text if isinstance(raw, RawModelOutput) else raw
    if not isinstance(text, str):
        text = "" if text is None else str(text)
    mentions, issues = parse_mentions(text)
    spans = []
    for line_no, line, mention in mentions:
        start, issue = resolve_quote(translation, mention.quote, mention.context, mention.occurrence)
        if issue is not None:
            issues.append(ParseIssue(issue, line_no, line, mention.quote))
        if start is None:
            continue
        spans.append(ErrorSpan(start, start + len(mention.quote), mention.severity, mention.category))
    issues.sort(key=lambda i: i.line_no)
    return canonicalize(Annotation(tuple(spans))), issues


def _word_left(text: str, a: int) -> int:
    while a > 0 and text[a - 1].isspace():
        a -= 1
    while a > 0 and not text[a - 1].isspace():
        a -= 1
    return a


def _word_right(text: str, b: int) -> int:
    n = len(text)
    while b < n and text[b].isspace():
        b += 1
    while b < n and not text[b].isspace():
        b += 1
    return b


def _context_ok(translation: str, span: ErrorSpan, a: int, b: int) -> bool:
    ctx = translation[a:b]
    quote = translation[span.start:span.end]
    if translation.find(ctx) != a or translation.find(ctx, a + 1) != -1:
        return False
    start, _ = resolve_quote(translation, quote, ctx)
    return start == span.start


def disambiguate(translation: str, span: ErrorSpan) -> tuple[Optional[str], Optional[int]]:
    """Pick (context, occurrence) so that resolve_quote returns exactly ``span``.

    Context windows grow one word per side until they are unique in the
    translation and locate the span, capped at MAX_CONTEXT_WORDS per side,
    then the whole translation.
    """
    quote = translation[span.start:span.end]
    starts = _occurrences(translation, quote)
    if len(starts) == 1:
        return None, None
    a, b = span.start, span.end
    for _ in range(MAX_CONTEXT_WORDS):
        na, nb = _word_left(translation, a), _word_right(translation, b)
        if (na, nb) == (a, b):
            break
        a, b = na, nb
        if _context_ok(translation, span, a, b):
            return translation[a:b], None
    if _context_ok(translation, span, 0, len(translation)):
        return translation, None
    return None, starts.index(span.start) + 1


def _render_span(span: ErrorSpan, translation: str) -> str:
    quote = translation[span.start:span.end]
    head = f"{span.severity.value}: {span.category} - " if span.category else f"{span.severity.value}: - "
    line = head + json.dumps(quote, ensure_ascii=False)
    context, occurrence = disambiguate(translation, span)
    if context is not None:
        line += " (context: " + json.dumps(context, ensure_ascii=False) + ")"
    elif occurrence is not None:
        line += f" (occurrence: {occurrence})"
    return line


def render_annotation(annotation: Annotation, translation: str) -> str:
    """Render an annotation as completion text that parses back to itself.

    Categories are emitted verbatim; for an exact round trip they must be
    free of double quotes and newlines and carry no outer whitespace.
    """
    canon = canonicalize(annotation, len(translation))
    if not canon.spans:
        return NO_ERROR
    return "\n".join(_render_span(s, translation) for s in canon.spans)
