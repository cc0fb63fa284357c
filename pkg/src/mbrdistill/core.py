"""Domain types for error span detection and JSONL serialization."""

from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional, Type, TypeVar

# MQM weights used for sentence-level scores.
MQM_WEIGHTS = {"minor": 1.0, "major": 5.0}
MQM_CAP = 25.0


class InvalidSpan(ValueError):
    pass


class MalformedLine(ValueError):
    """A JSONL line could not be decoded into a record."""

    def __init__(self, line_no: int, line: str, reason: str = "", path: Any = None):
        self.line_no = line_no
        self.line = line
        self.reason = reason
        self.path = None if path is None else str(path)
        where = f"{self.path}:" if self.path else "line "
        super().__init__(f"{where}{line_no}: malformed JSONL record ({reason}): {line[:200]!r}")


class Severity(str, enum.Enum):
    MINOR = "minor"
    MAJOR = "major"

    @property
    def rank(self) -> int:
        return 0 if self is Severity.MINOR else 1

    @classmethod
    def parse(cls, label: str) -> "Severity":
        """Strict parse of a serialized severity value."""
        try:
            return cls(label.lower())
        except (ValueError, AttributeError):
            raise ValueError(f"unknown severity {label!r}") from None


@dataclass(frozen=True)
class ErrorSpan:
    """Half-open character range [start, end) of a translation."""

    start: int
    end: int
    severity: Severity
    category: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.severity, Severity):
            object.__setattr__(self, "severity", Severity.parse(self.severity))
        if isinstance(self.start, bool) or isinstance(self.end, bool):
            raise InvalidSpan(f"non-integer offsets ({self.start}, {self.end})")
        if not (0 <= self.start < self.end):
            raise InvalidSpan(f"need 0 <= start < end, got ({self.start}, {self.end})")

    def sort_key(self):
        return (self.start, self.end, self.severity.rank, self.category is not None, self.category or "")

    def check(self, translation_len: int) -> None:
        if self.end > translation_len:
            raise InvalidSpan(
                f"span ({self.start}, {self.end}) exceeds translation length {translation_len}"
            )

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"start": self.start, "end": self.end, "severity": self.severity.value}
        if self.category is not None:
            d["category"] = self.category
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorSpan":
        return cls(int(d["start"]), int(d["end"]), Severity.parse(d["severity"]), d.get("category"))


def _categories_compatible(a: list, b: list) -> bool:
    # None acts as a wildcard that matches any category.
    a_named = Counter(c for c in a if c is not None)
    b_named = Counter(c for c in b if c is not None)
    common = sum((a_named & b_named).values())
    a_left = sum(a_named.values()) - common
    b_left = sum(b_named.values()) - common
    return a_left <= len(b) - sum(b_named.values()) and b_left <= len(a) - sum(a_named.values())


@dataclass(frozen=True, eq=False)
class Annotation:
    """A set of error spans over one translation; empty means "no error".

    Equality and hashing use the canonical form and ignore a category
    whenever either side lacks one.
    """

    spans: tuple[ErrorSpan, ...] = ()
    _key: tuple = field(init=False, repr=False, compare=False)
    _cats: Optional[dict] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        spans = tuple(self.spans)
        object.__setattr__(self, "spans", spans)
        ordered = sorted(set(spans), key=ErrorSpan.sort_key)
        object.__setattr__(self, "_key", tuple((s.start, s.end, s.severity.rank) for s in ordered))
        cats = None
        if any(s.category is not None for s in ordered):
            cats = {}
            for s in ordered:
                cats.setdefault((s.start, s.end, s.severity.rank), []).append(s.category)
        object.__setattr__(self, "_cats", cats)

    @classmethod
    def of(cls, *spans) -> "Annotation":
        """Build from ``(start, end, severity[, category])`` tuples or spans."""
        out = []
        for s in spans:
            out.append(s if isinstance(s, ErrorSpan) else ErrorSpan(*s))
        return cls(tuple(out))

    @property
    def position_key(self) -> tuple:
        return self._key

    def __len__(self) -> int:
        return len(self.spans)

    def __iter__(self):
        return iter(self.spans)

    def __bool__(self) -> bool:
        return bool(self.spans)

    def __hash__(self) -> int:
        return hash(self._key)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Annotation):
            return NotImplemented
        if self._key != other._key:
            return False
        if self._cats is None or other._cats is None:
            # All-wildcard side: equal keys already imply equal span counts per position.
            return True
        return all(_categories_compatible(v, other._cats[k]) for k, v in self._cats.items())

    def check(self, translation_len: int) -> None:
        for s in self.spans:
            s.check(translation_len)

    def to_list(self) -> list[dict]:
        return [s.to_dict() for s in self.spans]

    @classmethod
    def from_list(cls, items: Iterable[dict]) -> "Annotation":
        return cls(tuple(ErrorSpan.from_dict(d) for d in items))


def canonicalize(annotation: Annotation, translation_len: Optional[int] = None) -> Annotation:
    """Sort spans by (start, end, severity, category) and drop exact duplicates."""
    if translation_len is not None:
        annotation.check(translation_len)
    return Annotation(tuple(sorted(set(annotation.spans), key=ErrorSpan.sort_key)))


def segment_score(annotation: Annotation) -> float:
    """MQM-style sentence score: 0 is perfect, -25 is the floor."""
    total = sum(MQM_WEIGHTS[s.severity.value] for s in canonicalize(annotation).spans)
    return 0.0 - min(MQM_CAP, total)


@dataclass(frozen=True)
class Segment:
    segment_id: str
    system_id: str
    source_lang: str
    target_lang: str
    source: str
    translation: str

    def __post_init__(self):
        if not self.segment_id:
            raise ValueError("segment_id must be non-empty")

    @property
    def key(self) -> tuple[str, str]:
        return (self.segment_id, self.system_id)

    @property
    def direction(self) -> str:
        return f"{self.source_lang}-{self.target_lang}"

    def to_dict(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "system_id": self.system_id,
            "source_lang": self.source_lang,
            "target_lang": self.target_lang,
            "source": self.source,
            "translation": self.translation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Segment":
        return cls(
            str(d["segment_id"]), str(d["system_id"]), str(d["source_lang"]),
            str(d["target_lang"]), str(d["source"]), str(d["translation"]),
        )


@dataclass(frozen=True)
class AnnotationRecord:
    """One line of an annotations file."""

    segment_id: str
    system_id: str
    annotation: Annotation

    @property
    def key(self) -> tuple[str, str]:
        return (self.segment_id, self.system_id)

    def to_dict(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "system_id": self.system_id,
            "spans": self.annotation.to_list(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        return cls(str(d["segment_id"]), str(d["system_id"]), Annotation.from_list(d["spans"]))


R = TypeVar("R")


def read_jsonl(path, record_type: Optional[Type[R]] = None) -> Iterator[R]:
    """Stream records from a UTF-8 JSONL file.

    With ``record_type`` each object goes through ``record_type.from_dict``;
    otherwise plain dicts are yielded. Blank lines are skipped.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="\n") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedLine(line_no, line.rstrip("\n"), e.msg, path) from None
            if not isinstance(obj, dict):
                raise MalformedLine(line_no, line.rstrip("\n"), "not a JSON object", path)
            if record_type is None:
                yield obj
                continue
            try:
                yield record_type.from_dict(obj)
            except (KeyError, TypeError, ValueError) as e:
                raise MalformedLine(line_no, line.rstrip("\n"), f"bad record: {e}", path) from None


def dumps_record(record) -> str:
    obj = record if isinstance(record, dict) else record.to_dict()
    return json.dumps(obj, ensure_ascii=False)


def write_jsonl(path, records: Iterable) -> int:
    """Write records (dicts or objects with ``to_dict``) one per line; returns the count."""
    n = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(dumps_record(r))
            f.write("\n")
            n += 1
    return n
