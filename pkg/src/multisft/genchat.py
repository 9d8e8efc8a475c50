"""Knowledge-grounded dialogue generation around encyclopedia segments."""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from .backend import ChatRequest, ChatResponse, make_request, parallel_map
from .corpus import Segment
from .tokencount import TokenCounter, reference_counter

logger = logging.getLogger(__name__)

DOC_OPEN = "<document>"
DOC_CLOSE = "<\\document>"
DEFAULT_TEMPERATURE = 0.7

PRINCIPLE_SLOTS = (
    "initial_question",
    "initial_answer",
    "indepth_question",
    "expansive_question",
    "answer_followup",
)
ASSET_SLOTS = ("system",) + PRINCIPLE_SLOTS

CATEGORIES = ("lang_specific_chat", "lang_agnostic_chat", "math", "code")
ORIGINS = ("generated", "translated", "sampled")


@dataclass(frozen=True)
class PromptTemplate:
    system_prompt: str
    language: str
    principles: str = ""
    doc_open: str = DOC_OPEN
    doc_close: str = DOC_CLOSE


@dataclass(frozen=True)
class PrincipleSet:
    initial_question: str
    initial_answer: str
    indepth_question: str
    expansive_question: str
    answer_followup: str


@dataclass(frozen=True)
class LangAssets:
    template: PromptTemplate
    principles: PrincipleSet


@dataclass(frozen=True)
class Message:
    role: str  # question | answer
    text: str
    token_count: int
    counter_id: str


@dataclass(frozen=True)
class Dialogue:
    id: str
    lang: str
    category: str
    origin: str
    source_ref: str
    turns: tuple[Message, ...]
    followup_kinds: tuple[str, ...]
    seed: int
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class GenFailure:
    dialogue_id: str
    source_ref: str
    error: str


def segment_ref(segment: Segment) -> str:
    return f"{segment.doc_id}:{segment.seg_index}"


def load_language_assets(
    langs: Sequence[str],
    assets_dir: str | Path | None = None,
    doc_close: str | None = None,
) -> dict[str, LangAssets]:
    """Load system prompts and principle texts; missing files fail startup loudly."""
    texts: dict[tuple[str, str], str] = {}
    missing: list[tuple[str, str]] = []
    for lang in langs:
        for slot in ASSET_SLOTS:
            if assets_dir is not None:
                path = Path(assets_dir) / lang / f"{slot}.txt"
                if path.is_file():
                    texts[(lang, slot)] = path.read_text(encoding="utf-8").strip()
                else:
                    missing.append((lang, slot))
                continue
            res = resources.files("multisft").joinpath(f"assets/prompts/{lang}/{slot}.txt")
            if res.is_file():
                texts[(lang, slot)] = res.read_text(encoding="utf-8").strip()
            else:
                missing.append((lang, slot))
    if missing:
        raise ValueError(f"missing prompt assets (lang, slot): {missing}")
    out: dict[str, LangAssets] = {}
    for lang in langs:
        template = PromptTemplate(system_prompt=texts[(lang, "system")], language=lang)
        if doc_close is not None:
            template = replace(template, doc_close=doc_close)
        out[lang] = LangAssets(
            template=template,
            principles=PrincipleSet(**{slot: texts[(lang, slot)] for slot in PRINCIPLE_SLOTS}),
        )
    return out


def render_history(history: Sequence[Message]) -> str:
    lines = []
    for message in history:
        prefix = "Q" if message.role == "question" else "A"
        lines.append(f"{prefix}: {message.text}")
    return "\n".join(lines)


def assemble_prompt(
    template: PromptTemplate,
    principles_text: str,
    background: str,
    history: Sequence[Message],
) -> str:
    if not background:
        raise ValueError("generation prompts need a non-empty background")
    blocks = [
        template.system_prompt,
        principles_text,
        f"{template.doc_open}{background}{template.doc_close}",
        render_history(history),
    ]
    return "\n\n".join(blocks)


def derive_rng(global_seed: int, dialogue_id: str, turn_index: int) -> random.Random:
    digest = hashlib.sha256(f"{global_seed}:{dialogue_id}:{turn_index}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def choose_followup_kind(rng_state: random.Random, p_indepth: float) -> str:
    if not 0.0 <= p_indepth <= 1.0:
        raise ValueError(f"p_indepth must be within [0, 1], got {p_indepth}")
    return "indepth" if rng_state.random() < p_indepth else "expansive"


def _complete_with_overflow_retry(
    backend: Any, request: ChatRequest, flags: list[str]
) -> ChatResponse:
    response = backend.complete(request)
    if response.finish_reason != "length":
        return response
    if request.max_output_tokens is None:
        flags.append("length_overflow")
        return response
    retry = replace(request, max_output_tokens=request.max_output_tokens * 2)
    response = backend.complete(retry)
    if response.finish_reason == "length":
        flags.append("length_overflow")
    return response


def generate_dialogue(
    segment: Segment,
    n_turns: int,
    p_indepth: float,
    assets: LangAssets,
    backend: Any,
    global_seed: int,
    dialogue_id: str,
    model: str = "mock",
    temperature: float = DEFAULT_TEMPERATURE,
    max_output_tokens: int | None = None,
    counter: TokenCounter | None = None,
) -> Dialogue:
    if n_turns < 1:
        raise ValueError("n_turns must be >= 1")
    if not segment.text:
        raise ValueError("segment text must be non-empty")
    counter = counter or reference_counter()
    template = assets.template
    principles = assets.principles
    turns: list[Message] = []
    followup_kinds: list[str] = []
    flags: list[str] = []

    def ask(principles_text: str) -> str:
        prompt = assemble_prompt(template, principles_text, segment.text, turns)
        request = make_request(
            model,
            [("user", prompt)],
            temperature=temperature,
            seed=global_seed,
            max_output_tokens=max_output_tokens,
        )
        return _complete_with_overflow_retry(backend, request, flags).content

    for turn_index in range(n_turns):
        if turn_index == 0:
            question_principles = principles.initial_question
        else:
            kind = choose_followup_kind(
                derive_rng(global_seed, dialogue_id, turn_index), p_indepth
            )
            followup_kinds.append(kind)
            question_principles = (
                principles.indepth_question if kind == "indepth" else principles.expansive_question
            )
        q_text = ask(question_principles)
        turns.append(Message("question", q_text, counter.count(q_text), counter.counter_id))
        answer_principles = (
            principles.initial_answer if turn_index == 0 else principles.answer_followup
        )
        a_text = ask(answer_principles)
        turns.append(Message("answer", a_text, counter.count(a_text), counter.counter_id))

    if flags:
        logger.warning("dialogue %s kept with flags %s", dialogue_id, flags)
    return Dialogue(
        id=dialogue_id,
        lang=template.language,
        category="lang_specific_chat",
        origin="generated",
        source_ref=segment_ref(segment),
        turns=tuple(turns),
        followup_kinds=tuple(followup_kinds),
        seed=global_seed,
        flags=tuple(flags),
    )


def run_generation(
    segments: Sequence[Segment],
    assets: LangAssets,
    backend: Any,
    target_count: int,
    global_seed: int,
    n_turns_range: tuple[int, int] = (2, 4),
    p_indepth: float = 0.5,
    dialogues_per_segment: int = 1,
    parallelism: int = 1,
    model: str = "mock",
    temperature: float = DEFAULT_TEMPERATURE,
    max_output_tokens: int | None = None,
    counter: TokenCounter | None = None,
) -> tuple[list[Dialogue], list[GenFailure]]:
    """Sample segments without replacement (seeded) until target_count dialogues exist."""
    lang = assets.template.language
    lo, hi = n_turns_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad n_turns range {n_turns_range}")
    order = list(segments)
    shuffle_rng = derive_rng(global_seed, f"{lang}-segment-order", 0)
    shuffle_rng.shuffle(order)
    # round-major: every segment once before any segment repeats
    attempts = [seg for round_no in range(dialogues_per_segment) for seg in order]

    dialogues: list[Dialogue] = []
    failures: list[GenFailure] = []
    counter_next = 0
    queue_pos = 0
    while len(dialogues) < target_count and queue_pos < len(attempts):
        need = target_count - len(dialogues)
        batch = attempts[queue_pos : queue_pos + need]
        queue_pos += len(batch)
        tasks = []
        for seg in batch:
            dialogue_id = f"{lang}-ls-{counter_next:06d}"
            counter_next += 1
            tasks.append((dialogue_id, seg))

        def attempt(task: tuple[str, Segment]) -> Dialogue:
            dialogue_id, seg = task
            n_turns = derive_rng(global_seed, dialogue_id, 0).randint(lo, hi)
            return generate_dialogue(
                seg,
                n_turns,
                p_indepth,
                assets,
                backend,
                global_seed,
                dialogue_id,
                model=model,
                temperature=temperature,
                max_output_tokens=max_output_tokens,
                counter=counter,
            )

        for task, result in zip(tasks, parallel_map(attempt, tasks, parallelism)):
            if isinstance(result, Dialogue):
                dialogues.append(result)
            else:
                failures.append(
                    GenFailure(
                        dialogue_id=task[0],
                        source_ref=segment_ref(task[1]),
                        error=f"{type(result).__name__}: {result}",
                    )
                )
    if len(dialogues) < target_count:
        logger.warning(
            "segment pool exhausted for %s: %d/%d dialogues generated",
            lang,
            len(dialogues),
            target_count,
        )
    return dialogues, failures


def dialogue_to_record(dialogue: Dialogue) -> dict[str, Any]:
    return {
        "id": dialogue.id,
        "lang": dialogue.lang,
        "category": dialogue.category,
        "origin": dialogue.origin,
        "source_ref": dialogue.source_ref,
        "seed": dialogue.seed,
        "turns": [{"role": m.role, "text": m.text} for m in dialogue.turns],
        "followup_kinds": list(dialogue.followup_kinds),
        "flags": list(dialogue.flags),
    }


def validate_dialogue_record(record: dict[str, Any]) -> str | None:
    """Return a reason string when the record breaks the dialogue invariants."""
    turns = record.get("turns")
    if not isinstance(turns, list) or not turns:
        return "missing_turns"
    if len(turns) % 2 != 0:
        return "odd_turn_count"
    for i, turn in enumerate(turns):
        if not isinstance(turn, dict) or not isinstance(turn.get("text"), str):
            return "malformed_turn"
        expected_role = "question" if i % 2 == 0 else "answer"
        if turn.get("role") != expected_role:
            return "role_order"
    kinds = record.get("followup_kinds")
    if not isinstance(kinds, list) or len(kinds) != len(turns) // 2 - 1:
        return "followup_kind_count"
    if any(k not in ("indepth", "expansive") for k in kinds):
        return "followup_kind_value"
    if record.get("category") not in CATEGORIES:
        return "bad_category"
    if record.get("origin") not in ORIGINS:
        return "bad_origin"
    if not isinstance(record.get("id"), str) or not record["id"]:
        return "missing_id"
    if not isinstance(record.get("lang"), str) or not record["lang"]:
        return "missing_lang"
    return None


def record_to_dialogue(record: dict[str, Any], counter: TokenCounter | None = None) -> Dialogue:
    problem = validate_dialogue_record(record)
    if problem is not None:
        raise ValueError(f"invalid dialogue record: {problem}")
    turns = []
    for turn in record["turns"]:
        text = turn["text"]
        turns.append(
            Message(
                role=turn["role"],
                text=text,
                token_count=counter.count(text) if counter else 0,
                counter_id=counter.counter_id if counter else "unset",
            )
        )
    return Dialogue(
        id=record["id"],
        lang=record["lang"],
        category=record["category"],
        origin=record["origin"],
        source_ref=str(record.get("source_ref", "")),
        turns=tuple(turns),
        followup_kinds=tuple(record["followup_kinds"]),
        seed=int(record.get("seed", 0)),
        flags=tuple(record.get("flags", ())),
    )
