"""Corpus preparation: dump parsing, language ID, script normalization, length filter, segmentation."""

from __future__ import annotations

import json
import logging
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable, Iterable, Iterator, Mapping

from .tokencount import TokenCounter

logger = logging.getLogger(__name__)

SUPPORTED_LANGS = ("en", "es", "fr", "ru", "zh")

_TERMINALS = frozenset(".!?…")
_TERMINALS_FULLWIDTH = frozenset("。！？")
_CLOSERS = frozenset("\"')]}" + "”’»」』〉》）］｝")


@dataclass(frozen=True)
class RawDocument:
    id: str
    title: str
    text: str
    expected_lang: str
    url: str | None = None


@dataclass(frozen=True)
class CleanDocument:
    id: str
    lang: str
    title: str
    text: str
    token_count: int
    counter_id: str


@dataclass(frozen=True)
class Segment:
    doc_id: str
    seg_index: int
    text: str
    token_count: int
    truncated_flag: bool


@dataclass(frozen=True)
class RejectLine:
    line_no: int
    reason: str
    raw: str


@dataclass(frozen=True)
class Drop:
    doc_id: str
    stage: str
    reason: str
    token_count: int | None = None


@dataclass
class LangClassifier:
    profiles: dict[str, dict[str, float]]
    confidence_threshold: float = 0.65


def parse_dump_stream(
    lines: Iterable[str],
    expected_lang: str,
    on_reject: Callable[[RejectLine], None] | None = None,
) -> Iterator[RawDocument]:
    """Yield RawDocuments from extractor output, routing malformed lines to on_reject."""

    def reject(line_no: int, reason: str, raw: str) -> None:
        if on_reject is not None:
            on_reject(RejectLine(line_no=line_no, reason=reason, raw=raw))

    seen_ids: set[str] = set()
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            reject(line_no, "invalid_json", line)
            continue
        if not isinstance(record, dict):
            reject(line_no, "not_an_object", line)
            continue
        missing = [k for k in ("id", "title", "text") if not isinstance(record.get(k), str)]
        if missing:
            reject(line_no, "missing_field:" + ",".join(missing), line)
            continue
        doc_id = record["id"]
        if not doc_id:
            reject(line_no, "empty_id", line)
            continue
        if doc_id in seen_ids:
            reject(line_no, "duplicate_id", line)
            continue
        seen_ids.add(doc_id)
        url = record.get("url")
        yield RawDocument(
            id=doc_id,
            title=record["title"],
            text=record["text"],
            expected_lang=expected_lang,
            url=url if isinstance(url, str) else None,
        )


def _trigram_vector(text: str) -> dict[str, float]:
    text = unicodedata.normalize("NFC", text).lower()
    grams = Counter(text[i : i + 3] for i in range(len(text) - 2))
    norm = math.sqrt(sum(c * c for c in grams.values()))
    if not norm:
        return {}
    return {g: c / norm for g, c in grams.items()}


def build_classifier(
    seed_texts: Mapping[str, str], confidence_threshold: float = 0.65
) -> LangClassifier:
    profiles = {lang: _trigram_vector(text) for lang, text in seed_texts.items()}
    empty = [lang for lang, prof in profiles.items() if not prof]
    if empty:
        raise ValueError(f"seed text too short to build a trigram profile: {empty}")
    return LangClassifier(profiles=profiles, confidence_threshold=confidence_threshold)


@lru_cache(maxsize=None)
def _bundled_seed_texts() -> dict[str, str]:
    base = resources.files("multisft").joinpath("assets/langid")
    return {
        lang: base.joinpath(f"{lang}.txt").read_text(encoding="utf-8")
        for lang in SUPPORTED_LANGS
    }


def default_classifier(confidence_threshold: float = 0.65) -> LangClassifier:
    return build_classifier(_bundled_seed_texts(), confidence_threshold)


def classify_language(clf: LangClassifier, text: str) -> tuple[str, float]:
    if not text.strip():
        raise ValueError("cannot classify empty text")
    vec = _trigram_vector(text)
    best_lang = ""
    best_sim = -1.0
    for lang in sorted(clf.profiles):
        profile = clf.profiles[lang]
        # both vectors are unit length, so the dot product is the cosine
        sim = sum(w * profile[g] for g, w in vec.items() if g in profile)
        if sim > best_sim:
            best_lang, best_sim = lang, sim
    return best_lang, max(best_sim, 0.0)


@lru_cache(maxsize=None)
def _zh_trad_to_simp() -> dict[int, str]:
    path = resources.files("multisft").joinpath("assets/zh_trad_to_simp.tsv")
    table: dict[int, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        trad, simp = line.split("\t")
        table[ord(trad)] = simp
    return table


def normalize_script(text: str, lang: str) -> str:
    text = unicodedata.normalize("NFC", text)
    if lang == "zh":
        text = text.translate(_zh_trad_to_simp())
    return text


def filter_by_length(
    doc: RawDocument,
    counter: TokenCounter,
    min_tokens: int = 1000,
    max_tokens: int = 10000,
) -> CleanDocument | Drop:
    count = counter.count(doc.text)
    if count < min_tokens:
        return Drop(doc_id=doc.id, stage="length_filter", reason="too_short", token_count=count)
    if count > max_tokens:
        return Drop(doc_id=doc.id, stage="length_filter", reason="too_long", token_count=count)
    return CleanDocument(
        id=doc.id,
        lang=doc.expected_lang,
        title=doc.title,
        text=doc.text,
        token_count=count,
        counter_id=counter.counter_id,
    )


def split_sentences(text: str, lang: str | None = None) -> list[tuple[int, int]]:
    """Sentence spans (start, end) covering the text exactly, trailing whitespace attached."""
    spans: list[tuple[int, int]] = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in _TERMINALS or ch in _TERMINALS_FULLWIDTH:
            j = i + 1
            while j < n and text[j] in _CLOSERS:
                j += 1
            k = j
            while k < n and text[k].isspace():
                k += 1
            # halfwidth terminals need trailing whitespace; fullwidth ones do not
            if k > j or ch in _TERMINALS_FULLWIDTH:
                spans.append((start, k))
                start = k
                i = k
                continue
        i += 1
    if start < n:
        spans.append((start, n))
    return spans


def _concat_count(counter: TokenCounter, left_text: str, left_count: int, right_text: str) -> int:
    # Sentence spans never end in a letter/digit (terminal punctuation, closer,
    # or whitespace), so under the reference counter no run merges across the
    # junction and counts are exactly additive. Subword merges can cross an
    # unspaced junction, so recount the whole candidate there.
    if counter.kind == "reference":
        return left_count + counter.count(right_text)
    return counter.count(left_text + right_text)


def _truncate_to_max(text: str, counter: TokenCounter, max_tokens: int) -> str:
    # Largest prefix whose count stays within max_tokens. Reference counts are
    # monotone and step by at most one per character, so the boundary prefix
    # measures exactly max_tokens.
    lo, hi = 0, len(text)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if counter.count(text[:mid]) <= max_tokens:
            lo = mid
        else:
            hi = mid - 1
    return text[:lo]


def segment_document(
    doc: CleanDocument,
    counter: TokenCounter,
    min_tokens: int = 1000,
    max_tokens: int = 2000,
) -> list[Segment]:
    """Greedy sentence packing into [min_tokens, max_tokens] chunks."""
    text = doc.text
    spans = split_sentences(text, doc.lang)
    segments: list[Segment] = []

    def emit(seg_text: str, count: int, truncated: bool) -> None:
        segments.append(
            Segment(
                doc_id=doc.id,
                seg_index=len(segments),
                text=seg_text,
                token_count=count,
                truncated_flag=truncated,
            )
        )

    seg_start: int | None = None
    seg_end = 0
    seg_count = 0
    for span_start, span_end in spans:
        sent_text = text[span_start:span_end]
        if seg_start is None:
            sent_count = counter.count(sent_text)
            if sent_count > max_tokens:
                truncated = _truncate_to_max(sent_text, counter, max_tokens)
                emit(truncated, counter.count(truncated), True)
                continue
            seg_start, seg_end, seg_count = span_start, span_end, sent_count
            continue
        candidate = _concat_count(counter, text[seg_start:seg_end], seg_count, sent_text)
        if candidate > max_tokens:
            emit(text[seg_start:seg_end], seg_count, False)
            sent_count = counter.count(sent_text)
            if sent_count > max_tokens:
                truncated = _truncate_to_max(sent_text, counter, max_tokens)
                emit(truncated, counter.count(truncated), True)
                seg_start = None
                continue
            seg_start, seg_end, seg_count = span_start, span_end, sent_count
        else:
            seg_end, seg_count = span_end, candidate
    if seg_start is not None:
        emit(text[seg_start:seg_end], seg_count, False)
    return segments
