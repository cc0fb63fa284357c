"""Candidate generation backends: an HTTP chat-completions client and a seeded mock."""

from __future__ import annotations

import bisect
import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from string import Template
from typing import Callable, Iterable, Iterator, Optional, Protocol

import httpx
import numpy as np

from .core import Annotation, ErrorSpan, Segment, Severity, canonicalize
from .gemba import RawModelOutput, parse_output, render_annotation

logger = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "MBRDISTILL_API_KEY"

LANGUAGE_NAMES = {
    "en": "English", "de": "German", "es": "Spanish", "ja": "Japanese", "zh": "Chinese",
    "cs": "Czech", "ru": "Russian", "uk": "Ukrainian", "he": "Hebrew", "fr": "French",
}


class GenerationFailure(RuntimeError):
    def __init__(self, segment_id: str, cause):
        self.segment_id = segment_id
        self.cause = cause
        super().__init__(f"generation failed for segment {segment_id!r}: {cause}")


@dataclass(frozen=True)
class GenerationConfig:
    num_candidates: int = 256
    top_k: int = 10
    temperature: float = 2.0
    max_tokens: int = 512
    request_timeout: float = 60.0
    max_retries: int = 5
    max_concurrent_requests: int = 8
    prompt_template_id: str = "gemba_mqm_v1"

    def __post_init__(self):
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.max_retries < 0 or self.max_concurrent_requests < 1:
            raise ValueError("max_retries must be >= 0 and max_concurrent_requests >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def load_template(template_id: str) -> dict:
    try:
        text = resources.files("mbrdistill").joinpath("templates", f"{template_id}.json").read_text("utf-8")
    except FileNotFoundError:
        raise ValueError(f"unknown prompt template {template_id!r}") from None
    return json.loads(text)


def _lang_name(tag: str) -> str:
    return LANGUAGE_NAMES.get(tag.split("-")[0].lower(), tag)


def build_messages(segment: Segment, template_id: str = "gemba_mqm_v1") -> list[dict]:
    tpl = load_template(template_id)
    user = Template(tpl["user"]).substitute(
        source_name=_lang_name(segment.source_lang),
        target_name=_lang_name(segment.target_lang),
        source=segment.source,
        translation=segment.translation,
    )
    return [{"role": "system", "content": tpl["system"]}, {"role": "user", "content": user}]


def render_prompt(segment: Segment, template_id: str = "gemba_mqm_v1") -> str:
    """Flat prompt string used in emitted training datasets."""
    system, user = build_messages(segment, template_id)
    return system["content"] + "\n\n" + user["content"]


def derive_seed(master_seed: int, *parts) -> int:
    """Stable 63-bit seed from a master seed and arbitrary key parts."""
    h = hashlib.sha256(json.dumps([master_seed, *parts], ensure_ascii=False).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big") >> 1


class Generator(Protocol):
    def generate(self, segment: Segment, config: GenerationConfig, seed: int) -> list[RawModelOutput]:
        ...

    def describe(self) -> dict:
        ...


def generate_candidates(
    generator: Generator, segment: Segment, config: GenerationConfig, seed: int
) -> list[RawModelOutput]:
    outputs = generator.generate(segment, config, seed)
    if len(outputs) != config.num_candidates:
        raise GenerationFailure(
            segment.segment_id, f"expected {config.num_candidates} outputs, got {len(outputs)}"
        )
    return outputs


def generate_stream(
    generator: Generator,
    segments: Iterable[Segment],
    config: GenerationConfig,
    seed_for: Callable[[Segment], int],
    max_in_flight: int = 1,
) -> Iterator[tuple[Segment, list[RawModelOutput]]]:
    """Yield (segment, outputs) in input order, with up to ``max_in_flight`` segments pending."""
    if max_in_flight <= 1:
        for seg in segments:
            yield seg, generate_candidates(generator, seg, config, seed_for(seg))
        return
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        pending: deque = deque()
        for seg in segments:
            pending.append((seg, pool.submit(generate_candidates, generator, seg, config, seed_for(seg))))
            if len(pending) >= max_in_flight:
                s, fut = pending.popleft()
                yield s, fut.result()
        while pending:
            s, fut = pending.popleft()
            yield s, fut.result()


class _Retryable(Exception):
    pass


class HttpBackend:
    """Chat-completions client with bounded concurrency and jittered exponential backoff.

    The API key is read from the environment variable named by
    ``api_key_env`` at request time and never stored in configs.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        max_n_per_request: Optional[int] = None,
        backoff_base: float = 0.5,
        backoff_max: float = 30.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.max_n_per_request = max_n_per_request
        self.backoff_base = backoff_base
        self.backoff_max = backoff_max
        self._transport = transport
        self._lock = threading.Lock()
        self._semaphores: dict[int, threading.BoundedSemaphore] = {}
        self._client: Optional[httpx.Client] = None

    def describe(self) -> dict:
        return {
            "backend": "http",
            "endpoint": self.endpoint,
            "model": self.model,
            "api_key_env": self.api_key_env,
            "max_n_per_request": self.max_n_per_request,
        }

    def _semaphore(self, bound: int) -> threading.BoundedSemaphore:
        with self._lock:
            if bound not in self._semaphores:
                self._semaphores[bound] = threading.BoundedSemaphore(bound)
            return self._semaphores[bound]

    def _http(self) -> httpx.Client:
        with self._lock:
            if self._client is None:
                self._client = httpx.Client(transport=self._transport)
            return self._client

    def close(self):
        if self._client is not None:
            self._client.close()
            self._client = None

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "").strip()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _attempt(self, payload: dict, config: GenerationConfig) -> list[str]:
        with self._semaphore(config.max_concurrent_requests):
            try:
                resp = self._http().post(
                    self.endpoint, json=payload, headers=self._headers(), timeout=config.request_timeout
                )
            except httpx.TransportError as e:
                raise _Retryable(repr(e)) from e
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Retryable(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise RuntimeError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            return [c["message"]["content"] or "" for c in body["choices"]]
        except (ValueError, KeyError, TypeError) as e:
            raise _Retryable(f"bad response body: {e}") from e

    def request(self, payload: dict, config: GenerationConfig, rng: random.Random) -> list[str]:
        last = None
        for attempt in range(config.max_retries + 1):
            try:
                return self._attempt(payload, config)
            except _Retryable as e:
                last = e
                if attempt == config.max_retries:
                    break
                delay = min(self.backoff_max, self.backoff_base * 2 ** attempt)
                time.sleep(delay * (0.5 + rng.random() / 2))
        raise RuntimeError(f"giving up after {config.max_retries} retries: {last}")

    def _collect(self, messages: list, n: int, config: GenerationConfig, seed: int) -> list[str]:
        rng = random.Random(seed)
        out: list[str] = []
        while len(out) < n:
            payload = {
                "model": self.model,
                "messages": messages,
                "temperature": config.temperature,
                "top_k": config.top_k,
                "n": n - len(out),
                "max_tokens": config.max_tokens,
                "seed": seed + len(out),
            }
            got = self.request(payload, config, rng)
            if not got:
                raise RuntimeError("server returned no choices")
            out.extend(got[: n - len(out)])
        return out

    def generate(self, segment: Segment, config: GenerationConfig, seed: int) -> list[RawModelOutput]:
        messages = build_messages(segment, config.prompt_template_id)
        c = config.num_candidates
        step = self.max_n_per_request or c
        chunks = [(i, min(step, c - i)) for i in range(0, c, step)]
        try:
            if len(chunks) == 1:
                texts = self._collect(messages, c, config, seed)
            else:
                with ThreadPoolExecutor(max_workers=min(len(chunks), config.max_concurrent_requests)) as pool:
                    futs = [pool.submit(self._collect, messages, n, config, seed + i) for i, n in chunks]
                    texts = [t for f in futs for t in f.result()]
        except RuntimeError as e:
            raise GenerationFailure(segment.segment_id, e) from e
        return [RawModelOutput(segment.segment_id, segment.system_id, t) for t in texts]


# --- mock backend -----------------------------------------------------------

_WORD = re.compile(r"\S+")


def _segment_key(segment: Segment) -> str:
    return f"{segment.segment_id}\t{segment.system_id}"


def _annotation_key(annotation: Annotation) -> str:
    return json.dumps(canonicalize(annotation).to_list(), ensure_ascii=False)


@dataclass(frozen=True)
class MockGeneratorSpec:
    """Seeded stand-in for an ESD model.

    Each segment has a latent base annotation over whole words. A candidate
    is either drawn from the learned masses (annotations reinforced by
    ``adapt_mock``) or, with the remaining probability, is a perturbation
    of the anchor: the most reinforced annotation, or the base annotation
    before any adaptation. Perturbations are span drops, boundary shifts,
    severity flips and spurious additions.
    """

    seed: int = 0
    drop_rate: float = 0.15
    shift_rate: float = 0.2
    flip_rate: float = 0.1
    add_rate: float = 0.2
    adaptation_rate: float = 0.5
    max_base_spans: int = 3
    learned: dict = field(default_factory=dict, compare=True)

    def __post_init__(self):
        for name in ("drop_rate", "shift_rate", "flip_rate", "add_rate", "adaptation_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    def mass(self, segment: Segment, annotation: Annotation) -> float:
        """Probability mass the learned component puts on ``annotation``."""
        return self.learned.get(_segment_key(segment), {}).get(_annotation_key(annotation), 0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["learned"] = {k: dict(sorted(v.items())) for k, v in sorted(self.learned.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MockGeneratorSpec":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _words(text: str) -> list[tuple[int, int]]:
    return [(m.start(), m.end()) for m in _WORD.finditer(text)]


def base_annotation(spec: MockGeneratorSpec, segment: Segment) -> Annotation:
    words = _words(segment.translation)
    if not words:
        return Annotation()
    rng = np.random.default_rng(derive_seed(spec.seed, "base", segment.segment_id, segment.system_id))
    k = int(rng.integers(0, min(spec.max_base_spans, len(words)) + 1))
    chosen = sorted(rng.choice(len(words), size=k, replace=False).tolist())
    spans = []
    for w in chosen:
        sev = Severity.MAJOR if rng.random() < 0.4 else Severity.MINOR
        spans.append(ErrorSpan(words[w][0], words[w][1], sev))
    return Annotation(tuple(spans))


def _perturb(spec: MockGeneratorSpec, anchor: Annotation, words, rng) -> Annotation:
    starts = [a for a, _ in words]
    ends = [b for _, b in words]
    spans = []
    for s in anchor.spans:
        if rng.random() < spec.drop_rate:
            continue
        start, end = s.start, s.end
        if rng.random() < spec.shift_rate:
            move = rng.integers(0, 3)
            i = bisect.bisect_right(ends, end)
            j = bisect.bisect_left(starts, start) - 1
            if move == 0 and i < len(ends):
                end = ends[i]
            elif move == 1 and j >= 0:
                start = starts[j]
            elif end - start > 1:
                end = start + int(rng.integers(1, end - start))
        sev = s.severity
        if rng.random() < spec.flip_rate:
            sev = Severity.MINOR if sev is Severity.MAJOR else Severity.MAJOR
        spans.append(ErrorSpan(start, end, sev))
    if rng.random() < spec.add_rate:
        a, b = words[int(rng.integers(0, len(words)))]
        spans.append(ErrorSpan(a, b, Severity.MINOR if rng.random() < 0.7 else Severity.MAJOR))
    return canonicalize(Annotation(tuple(spans)))


class MockGenerator:
    """Deterministic generator driven by a MockGeneratorSpec; emits grammar-conformant text."""

    def __init__(self, spec: MockGeneratorSpec):
        self.spec = spec

    def describe(self) -> dict:
        return {"backend": "mock", "spec": self.spec.to_dict()}

    def sample(self, segment: Segment, n: int, seed: int) -> list[Annotation]:
        words = _words(segment.translation)
        base = base_annotation(self.spec, segment)
        rng = np.random.default_rng(derive_seed(self.spec.seed, "sample", seed))
        learned = sorted(self.spec.learned.get(_segment_key(segment), {}).items())
        learned_ann = [Annotation.from_list(json.loads(k)) for k, _ in learned]
        # Noise is centred on the most reinforced annotation once there is one.
        anchor = base
        if learned:
            top = max(range(len(learned)), key=lambda i: (learned[i][1], -i))
            if learned[top][1] > 0:
                anchor = learned_ann[top]
        out = []
        for _ in range(n):
            u = rng.random()
            acc = 0.0
            picked = None
            for ann, (_, m) in zip(learned_ann, learned):
                acc += m
                if u < acc:
                    picked = ann
                    break
            if picked is None:
                picked = _perturb(self.spec, anchor, words, rng) if words else Annotation()
            out.append(picked)
        return out

    def generate(self, segment: Segment, config: GenerationConfig, seed: int) -> list[RawModelOutput]:
        return [
            RawModelOutput(segment.segment_id, segment.system_id, render_annotation(a, segment.translation))
            for a in self.sample(segment, config.num_candidates, seed)
        ]


def _reinforce(masses: dict, key: str, rate: float):
    for k in masses:
        masses[k] *= 1.0 - rate
    masses[key] = masses.get(key, 0.0) + rate


def adapt_mock(spec: MockGeneratorSpec, dataset: Iterable) -> MockGeneratorSpec:
    """Shift the mock toward a distilled dataset, standing in for a training step.

    Desirable completions (SFT targets, DPO chosen, KTO label=True) gain
    mass; rejected/undesirable ones lose it; noise rates shrink by the
    adaptation rate.
    """
    rate = spec.adaptation_rate
    if rate == 0.0:
        return spec
    learned = {k: dict(v) for k, v in spec.learned.items()}
    for rec in dataset:
        seg = rec.segment
        masses = learned.setdefault(_segment_key(seg), {})
        for text, desirable in rec.completions():
            ann, _ = parse_output(text, seg.translation)
            key = _annotation_key(ann)
            if desirable:
                _reinforce(masses, key, rate)
            elif key in masses:
                masses[key] *= 1.0 - rate
    keep = 1.0 - rate
    return replace(
        spec,
        drop_rate=spec.drop_rate * keep,
        shift_rate=spec.shift_rate * keep,
        flip_rate=spec.flip_rate * keep,
        add_rate=spec.add_rate * keep,
        learned=learned,
    )


def candidate_diversity(annotations: Iterable[Annotation]) -> int:
    return len(set(annotations))


# --- synthetic corpora ------------------------------------------------------

_VOCAB = (
    "the a cat dog sat on mat house river quickly slowly green old new city "
    "market bridge light over under with from to and but letter window train "
    "station morning evening table book small large road"
).split()


def synthetic_segments(
    n: int, seed: int = 0, systems: tuple[str, ...] = ("sys0",), source_lang="en", target_lang="de"
) -> list[Segment]:
    """Random word-salad segments; every system gets its own translation of each source."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        src = " ".join(rng.choice(_VOCAB, size=int(rng.integers(4, 12))).tolist())
        for sys_id in systems:
            tgt = " ".join(rng.choice(_VOCAB, size=int(rng.integers(4, 14))).tolist())
            out.append(Segment(f"seg{i:05d}", sys_id, source_lang, target_lang, src, tgt))
    return out
