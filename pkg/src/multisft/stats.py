"""Dataset-card statistics: dialogue/turn counts and average token lengths."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

from .genchat import validate_dialogue_record
from .tokencount import TokenCounter

logger = logging.getLogger(__name__)

COLUMNS = ("dialogues", "turns", "avg_q", "avg_a", "avg_turn")


@dataclass(frozen=True)
class CorpusStats:
    dialogues: int
    turns: int
    avg_question_tokens: float
    avg_answer_tokens: float
    avg_turn_tokens: float
    counter_id: str


class StatsAccumulator:
    """One-pass accumulator; mergeable for parallel partial aggregation."""

    def __init__(self, counter: TokenCounter) -> None:
        self.counter = counter
        self.dialogues = 0
        self.turns = 0
        self.q_tokens = 0
        self.a_tokens = 0
        self.rejects = 0

    def add(self, record: dict[str, Any]) -> bool:
        problem = validate_dialogue_record(record)
        if problem is not None:
            self.rejects += 1
            logger.debug("rejecting record %r: %s", record.get("id"), problem)
            return False
        self.dialogues += 1
        turns = record["turns"]
        self.turns += len(turns) // 2
        for turn in turns:
            n = self.counter.count(turn["text"])
            if turn["role"] == "question":
                self.q_tokens += n
            else:
                self.a_tokens += n
        return True

    def merge(self, other: StatsAccumulator) -> None:
        if other.counter.counter_id != self.counter.counter_id:
            raise ValueError("cannot merge accumulators with different counters")
        self.dialogues += other.dialogues
        self.turns += other.turns
        self.q_tokens += other.q_tokens
        self.a_tokens += other.a_tokens
        self.rejects += other.rejects

    def finalize(self) -> CorpusStats:
        if self.turns == 0:
            return CorpusStats(self.dialogues, 0, 0.0, 0.0, 0.0, self.counter.counter_id)
        avg_q = self.q_tokens / self.turns
        avg_a = self.a_tokens / self.turns
        return CorpusStats(
            dialogues=self.dialogues,
            turns=self.turns,
            avg_question_tokens=avg_q,
            avg_answer_tokens=avg_a,
            avg_turn_tokens=avg_q + avg_a,
            counter_id=self.counter.counter_id,
        )


def compute_stats(records: Iterable[dict[str, Any]], counter: TokenCounter) -> CorpusStats:
    acc = StatsAccumulator(counter)
    for record in records:
        acc.add(record)
    return acc.finalize()


def per_language_stats(
    records: Iterable[dict[str, Any]], counter: TokenCounter
) -> dict[str, CorpusStats]:
    partitions: dict[str, StatsAccumulator] = {}
    for record in records:
        lang = record.get("lang")
        if not isinstance(lang, str) or not lang:
            continue
        if lang not in partitions:
            partitions[lang] = StatsAccumulator(counter)
        partitions[lang].add(record)
    return {lang: acc.finalize() for lang, acc in sorted(partitions.items())}


def _row_values(stats: CorpusStats) -> list[str]:
    return [
        str(stats.dialogues),
        str(stats.turns),
        f"{stats.avg_question_tokens:.2f}",
        f"{stats.avg_answer_tokens:.2f}",
        f"{stats.avg_turn_tokens:.2f}",
    ]


def render_report(
    stats: CorpusStats | Mapping[str, CorpusStats], fmt: str = "aligned_table"
) -> str:
    """Deterministic text rendering; mapping input is comparison mode (one row per key)."""
    if fmt not in ("aligned_table", "delimited"):
        raise ValueError(f"unknown report format {fmt!r}")
    if isinstance(stats, CorpusStats):
        labeled = [("", stats)]
        label_header = None
    else:
        labeled = [(label, s) for label, s in stats.items()]
        label_header = "lang"
        counter_ids = {s.counter_id for _, s in labeled}
        if len(counter_ids) > 1:
            raise ValueError(
                f"comparison across different counters is meaningless: {sorted(counter_ids)}"
            )
    counter_id = labeled[0][1].counter_id if labeled else "none"
    empty = any(s.dialogues == 0 for _, s in labeled)

    header = list(COLUMNS)
    rows = [_row_values(s) for _, s in labeled]
    if label_header is not None:
        header = [label_header] + header
        rows = [[label] + row for (label, _), row in zip(labeled, rows)]

    lines = [f"# counter: {counter_id}"]
    if fmt == "delimited":
        lines.append("\t".join(header))
        lines.extend("\t".join(row) for row in rows)
    else:
        widths = [max((len(row[i]) for row in rows), default=0) for i in range(len(header))]
        lines.append("# " + "  ".join(header))
        for row in rows:
            lines.append("  ".join(value.ljust(width) for value, width in zip(row, widths)).rstrip())
    if empty:
        lines.append("# empty corpus: averages are 0 by convention")
    return "\n".join(lines) + "\n"
