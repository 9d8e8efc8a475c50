"""Multi-criteria filter that removes region-specific English conversations."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from .backend import make_request, parallel_map
from .genchat import Dialogue, render_history
from .tokencount import TokenCounter, reference_counter

logger = logging.getLogger(__name__)

CRITERION_IDS = (1, 2, 3, 4, 5, 6)
PARSE_FAILED_SENTINEL = 0
DEFAULT_JUDGE_BUDGET = 3000

_JUDGMENT_RE = re.compile(r"CRITERIA:\s*(NONE|\[[0-9,\s]*\])")

STRICT_REASK = (
    "Your previous reply could not be parsed. Reply with exactly one line in the form "
    "CRITERIA: [numbers] or CRITERIA: NONE, and nothing else."
)


@dataclass(frozen=True)
class FilterVerdict:
    dialogue_id: str
    keep: bool
    matched_criteria: frozenset[int]
    stage: str  # prefilter | judge
    raw_judgment: str | None = None

    def __post_init__(self) -> None:
        if self.stage not in ("prefilter", "judge"):
            raise ValueError(f"bad verdict stage {self.stage!r}")
        if self.keep != (not self.matched_criteria):
            raise ValueError("keep verdicts must have empty matched_criteria and vice versa")


@dataclass
class FilterResult:
    kept: list[Dialogue]
    dropped: list[tuple[Dialogue, FilterVerdict]]
    failures: list[tuple[str, str]]  # (dialogue_id, error)
    criterion_counts: dict[int, int]


def load_lexicons(lexicon_dir: str | Path | None = None) -> dict[int, tuple[re.Pattern[str], ...]]:
    """Load per-criterion pattern files criterion_<n>.txt; each line is a regex."""
    lexicons: dict[int, tuple[re.Pattern[str], ...]] = {}
    for n in CRITERION_IDS:
        name = f"criterion_{n}.txt"
        if lexicon_dir is not None:
            path = Path(lexicon_dir) / name
            raw = path.read_text(encoding="utf-8") if path.is_file() else ""
        else:
            res = resources.files("multisft").joinpath(f"assets/filter/lexicons/{name}")
            raw = res.read_text(encoding="utf-8") if res.is_file() else ""
        patterns = []
        for lineno, line in enumerate(raw.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                patterns.append(re.compile(line))
            except re.error as err:
                raise ValueError(f"{name} line {lineno}: bad pattern {line!r}: {err}") from err
        lexicons[n] = tuple(patterns)
    return lexicons


def load_judge_template(path: str | Path | None = None) -> str:
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
    else:
        text = (
            resources.files("multisft")
            .joinpath("assets/filter/judge_template.txt")
            .read_text(encoding="utf-8")
        )
    if "{conversation}" not in text:
        raise ValueError("judge template must contain the {conversation} placeholder")
    return text


def prefilter(
    dialogue: Dialogue, lexicons: dict[int, tuple[re.Pattern[str], ...]]
) -> FilterVerdict | None:
    """Cheap lexical screen; returns a drop verdict on any hit, else nothing."""
    matched = set()
    for criterion, patterns in lexicons.items():
        for pattern in patterns:
            if any(pattern.search(m.text) for m in dialogue.turns):
                matched.add(criterion)
                break
    if not matched:
        return None
    return FilterVerdict(
        dialogue_id=dialogue.id,
        keep=False,
        matched_criteria=frozenset(matched),
        stage="prefilter",
    )


def render_conversation(dialogue: Dialogue, counter: TokenCounter, budget: int) -> str:
    """Q:/A: rendering of the whole dialogue, truncated to the token budget from the front."""
    text = render_history(dialogue.turns)
    if counter.count(text) <= budget:
        return text
    lo, hi = 0, len(text)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if counter.count(text[:mid]) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return text[:lo]


def parse_judgment(reply: str) -> frozenset[int] | None:
    """Return the matched-criteria set, empty for NONE; None when unparseable."""
    matches = _JUDGMENT_RE.findall(reply)
    if not matches:
        return None
    token = matches[-1]
    if token == "NONE":
        return frozenset()
    numbers = [int(part) for part in re.findall(r"\d+", token)]
    if any(n not in CRITERION_IDS for n in numbers):
        return None
    return frozenset(numbers)


def judge(
    dialogue: Dialogue,
    backend: Any,
    judge_template: str,
    counter: TokenCounter | None = None,
    budget: int = DEFAULT_JUDGE_BUDGET,
    model: str = "mock",
    temperature: float = 0.0,
    seed: int | None = None,
) -> FilterVerdict:
    counter = counter or reference_counter()
    conversation = render_conversation(dialogue, counter, budget)
    prompt = judge_template.replace("{conversation}", conversation)
    reply = backend.complete(
        make_request(model, [("user", prompt)], temperature=temperature, seed=seed)
    ).content
    matched = parse_judgment(reply)
    if matched is None:
        strict_prompt = f"{prompt}\n\n{STRICT_REASK}"
        reply = backend.complete(
            make_request(model, [("user", strict_prompt)], temperature=temperature, seed=seed)
        ).content
        matched = parse_judgment(reply)
    if matched is None:
        logger.warning("dialogue %s: judge reply unparseable twice, parse_failed", dialogue.id)
        return FilterVerdict(
            dialogue_id=dialogue.id,
            keep=False,
            matched_criteria=frozenset({PARSE_FAILED_SENTINEL}),
            stage="judge",
            raw_judgment=reply,
        )
    return FilterVerdict(
        dialogue_id=dialogue.id,
        keep=not matched,
        matched_criteria=matched,
        stage="judge",
        raw_judgment=reply,
    )


def filter_dataset(
    dialogues: Sequence[Dialogue],
    backend: Any,
    lexicons: dict[int, tuple[re.Pattern[str], ...]] | None = None,
    judge_template: str | None = None,
    counter: TokenCounter | None = None,
    budget: int = DEFAULT_JUDGE_BUDGET,
    model: str = "mock",
    temperature: float = 0.0,
    seed: int | None = None,
    parallelism: int = 1,
) -> FilterResult:
    """Partition dialogues into kept and dropped; every input lands in exactly one stream."""
    lexicons = lexicons if lexicons is not None else load_lexicons()
    template = judge_template if judge_template is not None else load_judge_template()

    def decide(dialogue: Dialogue) -> FilterVerdict:
        verdict = prefilter(dialogue, lexicons)
        if verdict is not None:
            return verdict
        return judge(
            dialogue,
            backend,
            template,
            counter=counter,
            budget=budget,
            model=model,
            temperature=temperature,
            seed=seed,
        )

    result = FilterResult(kept=[], dropped=[], failures=[], criterion_counts={})
    for dialogue, outcome in zip(dialogues, parallel_map(decide, dialogues, parallelism)):
        if isinstance(outcome, Exception):
            result.failures.append((dialogue.id, f"{type(outcome).__name__}: {outcome}"))
            continue
        if outcome.keep:
            result.kept.append(dialogue)
        else:
            result.dropped.append((dialogue, outcome))
            for criterion in outcome.matched_criteria:
                result.criterion_counts[criterion] = result.criterion_counts.get(criterion, 0) + 1
    return result


def verdict_to_record(verdict: FilterVerdict) -> dict[str, Any]:
    return {
        "dialogue_id": verdict.dialogue_id,
        "keep": verdict.keep,
        "matched_criteria": sorted(verdict.matched_criteria),
        "stage": verdict.stage,
        "raw_judgment": verdict.raw_judgment,
    }
