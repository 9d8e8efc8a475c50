"""Translation of filtered English conversations with verbatim-copy enforcement."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from .backend import make_request, parallel_map
from .genchat import Dialogue, Message, render_history
from .tokencount import TokenCounter, reference_counter

logger = logging.getLogger(__name__)

TARGET_LANGS = ("zh", "ru", "fr", "es")

SPAN_KINDS = ("fenced_code", "inline_code", "latex_math", "citation", "url")

_FENCE_RE = re.compile(r"```.*?```", re.DOTALL)
_INLINE_CODE_RE = re.compile(r"`[^`\n]+`")
_MATH_DISPLAY_RE = re.compile(r"\$\$.+?\$\$", re.DOTALL)
_MATH_INLINE_RE = re.compile(r"\$(?!\s)[^$\n]+?(?<!\s)\$")
_MATH_BRACKET_RE = re.compile(r"\\\[.+?\\\]", re.DOTALL)
_MATH_PAREN_RE = re.compile(r"\\\(.+?\\\)", re.DOTALL)
_CITATION_NUM_RE = re.compile(r"\[\d+(?:\s*[,-]\s*\d+)*\]")
_CITATION_AUTHOR_RE = re.compile(
    r"\((?:[A-Z][\w'-]+(?:\s+(?:and|&)\s+[A-Z][\w'-]+)?(?:\s+et al\.?)?),\s*\d{4}[a-z]?\)"
)
_URL_RE = re.compile(r"https?://[^\s<>\"')\]]+")


@dataclass(frozen=True)
class ProtectedSpan:
    start: int
    end: int
    kind: str
    detail: str = ""

    def __post_init__(self) -> None:
        if self.end <= self.start:
            raise ValueError("protected spans must be non-empty")
        if self.kind not in SPAN_KINDS:
            raise ValueError(f"unknown span kind {self.kind!r}")


@dataclass(frozen=True)
class TranslationRecord:
    source_dialogue_id: str
    target_lang: str
    turns: tuple[Message, ...]
    violations: tuple[dict[str, Any], ...]


@dataclass(frozen=True)
class TranslateFailure:
    dialogue_id: str
    target_lang: str
    error: str


def load_translate_principles(
    langs: Sequence[str] = TARGET_LANGS, assets_dir: str | Path | None = None
) -> dict[str, str]:
    texts: dict[str, str] = {}
    missing: list[str] = []
    for lang in langs:
        if assets_dir is not None:
            path = Path(assets_dir) / f"{lang}.txt"
            if path.is_file():
                texts[lang] = path.read_text(encoding="utf-8").strip()
            else:
                missing.append(lang)
            continue
        res = resources.files("multisft").joinpath(f"assets/translate/{lang}.txt")
        if res.is_file():
            texts[lang] = res.read_text(encoding="utf-8").strip()
        else:
            missing.append(lang)
    if missing:
        raise ValueError(f"missing translation principles for languages: {missing}")
    return texts


def find_protected_spans(text: str) -> list[ProtectedSpan]:
    """Locate fragments that must be copied verbatim by the translator."""
    candidates: list[ProtectedSpan] = []

    fence_end = 0
    for m in _FENCE_RE.finditer(text):
        candidates.append(ProtectedSpan(m.start(), m.end(), "fenced_code"))
        fence_end = m.end()
    loose = text.find("```", fence_end)
    if loose != -1:
        candidates.append(ProtectedSpan(loose, len(text), "fenced_code", "unterminated"))

    for regex, kind in (
        (_INLINE_CODE_RE, "inline_code"),
        (_MATH_DISPLAY_RE, "latex_math"),
        (_MATH_INLINE_RE, "latex_math"),
        (_MATH_BRACKET_RE, "latex_math"),
        (_MATH_PAREN_RE, "latex_math"),
        (_CITATION_NUM_RE, "citation"),
        (_CITATION_AUTHOR_RE, "citation"),
    ):
        for m in regex.finditer(text):
            candidates.append(ProtectedSpan(m.start(), m.end(), kind))

    for m in _URL_RE.finditer(text):
        end = m.end()
        while end > m.start() and text[end - 1] in ".,;:!?":
            end -= 1
        if end > m.start():
            candidates.append(ProtectedSpan(m.start(), end, "url"))

    # earliest-starting-longest wins; later overlapping candidates are dropped
    selected: list[ProtectedSpan] = []
    for span in sorted(candidates, key=lambda s: (s.start, -s.end)):
        if not selected or span.start >= selected[-1].end:
            selected.append(span)
    return selected


def verify_protected(source_text: str, translated_text: str) -> list[dict[str, str]]:
    """Check that every protected fragment of the source survives verbatim."""
    violations = []
    for span in find_protected_spans(source_text):
        fragment = source_text[span.start : span.end]
        if fragment not in translated_text:
            snippet = fragment if len(fragment) <= 60 else fragment[:57] + "..."
            violations.append({"kind": span.kind, "detail": f"missing verbatim {snippet!r}"})
    return violations


def _build_system_block(
    principles: str, context: Sequence[Message], corrective: str | None
) -> str:
    blocks = [principles]
    if context:
        blocks.append(
            "Conversation so far, for reference only, do not translate it:\n"
            + render_history(context)
        )
    if corrective:
        blocks.append(corrective)
    return "\n\n".join(blocks)


def translate_message(
    text: str,
    target_lang: str,
    backend: Any,
    principles_template: str,
    context: Sequence[Message] = (),
    corrective: str | None = None,
    model: str = "mock",
    temperature: float = 0.0,
    seed: int | None = None,
) -> str:
    if not text:
        raise ValueError("cannot translate empty text")
    if target_lang not in TARGET_LANGS:
        raise ValueError(f"unsupported target language {target_lang!r}")
    request = make_request(
        model,
        [
            ("system", _build_system_block(principles_template, context, corrective)),
            ("user", text),
        ],
        temperature=temperature,
        seed=seed,
    )
    return backend.complete(request).content


def translate_dialogue(
    dialogue: Dialogue,
    target_lang: str,
    backend: Any,
    principles_template: str,
    counter: TokenCounter | None = None,
    model: str = "mock",
    temperature: float = 0.0,
    seed: int | None = None,
) -> TranslationRecord:
    """Translate turn by turn, re-asking once when a protected fragment is lost."""
    counter = counter or reference_counter()
    turns: list[Message] = []
    violations: list[dict[str, Any]] = []
    for i, message in enumerate(dialogue.turns):
        context = dialogue.turns[:i]
        out = translate_message(
            message.text,
            target_lang,
            backend,
            principles_template,
            context=context,
            model=model,
            temperature=temperature,
            seed=seed,
        )
        turn_violations = verify_protected(message.text, out)
        if turn_violations:
            spans = find_protected_spans(message.text)
            fragments = [message.text[s.start : s.end] for s in spans]
            missing = [f for f in fragments if f not in out]
            corrective = (
                "Your previous translation altered fragments that must be copied exactly. "
                "Copy each of these fragments verbatim, character for character: "
                + " ; ".join(repr(f) for f in missing)
            )
            out = translate_message(
                message.text,
                target_lang,
                backend,
                principles_template,
                context=context,
                corrective=corrective,
                model=model,
                temperature=temperature,
                seed=seed,
            )
            turn_violations = verify_protected(message.text, out)
        for violation in turn_violations:
            violations.append({"turn_index": i, **violation})
        turns.append(Message(message.role, out, counter.count(out), counter.counter_id))
    if violations:
        logger.warning(
            "dialogue %s -> %s kept with %d span violations",
            dialogue.id,
            target_lang,
            len(violations),
        )
    return TranslationRecord(
        source_dialogue_id=dialogue.id,
        target_lang=target_lang,
        turns=tuple(turns),
        violations=tuple(violations),
    )


def translation_to_dialogue(record: TranslationRecord, source: Dialogue) -> Dialogue:
    flags = tuple(
        f"span_violation:{v['turn_index']}:{v['kind']}" for v in record.violations
    )
    return Dialogue(
        id=f"{source.id}/{record.target_lang}",
        lang=record.target_lang,
        category=source.category,
        origin="translated",
        source_ref=source.id,
        turns=record.turns,
        followup_kinds=source.followup_kinds,
        seed=source.seed,
        flags=flags,
    )


def run_translation(
    dialogues: Sequence[Dialogue],
    target_langs: Sequence[str],
    backend: Any,
    principles: dict[str, str] | None = None,
    counter: TokenCounter | None = None,
    model: str = "mock",
    temperature: float = 0.0,
    seed: int | None = None,
    parallelism: int = 1,
) -> tuple[list[Dialogue], list[TranslateFailure]]:
    """Translate every input dialogue into every target language."""
    for lang in target_langs:
        if lang not in TARGET_LANGS:
            raise ValueError(f"unsupported target language {lang!r}")
    principles = principles if principles is not None else load_translate_principles(target_langs)
    jobs = [(dialogue, lang) for lang in target_langs for dialogue in dialogues]

    def work(job: tuple[Dialogue, str]) -> Dialogue:
        dialogue, lang = job
        record = translate_dialogue(
            dialogue,
            lang,
            backend,
            principles[lang],
            counter=counter,
            model=model,
            temperature=temperature,
            seed=seed,
        )
        return translation_to_dialogue(record, dialogue)

    out: list[Dialogue] = []
    failures: list[TranslateFailure] = []
    for job, result in zip(jobs, parallel_map(work, jobs, parallelism)):
        if isinstance(result, Exception):
            failures.append(
                TranslateFailure(job[0].id, job[1], f"{type(result).__name__}: {result}")
            )
        else:
            out.append(result)
    return out, failures
