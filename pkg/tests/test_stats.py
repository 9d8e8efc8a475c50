"""Tests for corpus statistics and report rendering."""

from __future__ import annotations

import random
from typing import Any

import pytest

from multisft.stats import (
    CorpusStats,
    StatsAccumulator,
    compute_stats,
    per_language_stats,
    render_report,
)
from multisft.tokencount import reference_counter


def words(n: int) -> str:
    return " ".join(["w"] * n)


def record(q_lengths: list[int], a_lengths: list[int], lang: str = "en",
           rec_id: str = "d0") -> dict[str, Any]:
    turns = []
    for q, a in zip(q_lengths, a_lengths):
        turns.append({"role": "question", "text": words(q)})
        turns.append({"role": "answer", "text": words(a)})
    return {
        "id": rec_id,
        "lang": lang,
        "category": "lang_specific_chat",
        "origin": "generated",
        "source_ref": "seg",
        "seed": 0,
        "turns": turns,
        "followup_kinds": ["indepth"] * (len(q_lengths) - 1),
    }


def fixture_records() -> list[dict[str, Any]]:
    return [
        record([10, 20], [40, 50], rec_id="d0"),
        record([30], [60], rec_id="d1"),
    ]


def random_record(rng: random.Random, rec_id: str, lang: str = "en") -> dict[str, Any]:
    pairs = rng.randint(1, 4)
    return record(
        [rng.randint(1, 30) for _ in range(pairs)],
        [rng.randint(1, 80) for _ in range(pairs)],
        lang=lang,
        rec_id=rec_id,
    )


def test_hand_computable_fixture() -> None:
    stats = compute_stats(fixture_records(), reference_counter())
    assert stats.dialogues == 2
    assert stats.turns == 3
    assert stats.avg_question_tokens == pytest.approx(20.0)
    assert stats.avg_answer_tokens == pytest.approx(50.0)
    assert stats.avg_turn_tokens == pytest.approx(70.0)
    assert stats.counter_id == "reference"


def test_empty_stream_is_zeros() -> None:
    stats = compute_stats([], reference_counter())
    assert stats == CorpusStats(0, 0, 0.0, 0.0, 0.0, "reference")


def test_avg_turn_is_sum_of_parts() -> None:
    rng = random.Random(3)
    records = [random_record(rng, f"d{i}") for i in range(200)]
    stats = compute_stats(records, reference_counter())
    assert stats.avg_turn_tokens == pytest.approx(
        stats.avg_question_tokens + stats.avg_answer_tokens
    )
    assert stats.turns >= stats.dialogues


def test_malformed_records_rejected_not_counted() -> None:
    acc = StatsAccumulator(reference_counter())
    assert acc.add(fixture_records()[0]) is True
    broken = fixture_records()[1]
    broken["turns"] = broken["turns"][:1]
    assert acc.add(broken) is False
    assert acc.rejects == 1
    stats = acc.finalize()
    assert stats.dialogues == 1
    assert stats.turns == 2


def test_streaming_equals_brute_force_on_10k() -> None:
    rng = random.Random(11)
    records = [random_record(rng, f"d{i}") for i in range(10_000)]
    counter = reference_counter()
    stats = compute_stats(records, counter)

    q_lengths = []
    a_lengths = []
    for rec in records:
        for turn in rec["turns"]:
            n = counter.count(turn["text"])
            (q_lengths if turn["role"] == "question" else a_lengths).append(n)
    assert stats.dialogues == len(records)
    assert stats.turns == len(q_lengths)
    assert stats.avg_question_tokens == pytest.approx(sum(q_lengths) / len(q_lengths))
    assert stats.avg_answer_tokens == pytest.approx(sum(a_lengths) / len(a_lengths))


def test_parallel_merge_equals_single_pass() -> None:
    rng = random.Random(5)
    records = [random_record(rng, f"d{i}") for i in range(400)]
    counter = reference_counter()
    whole = compute_stats(records, counter)

    merged = StatsAccumulator(counter)
    for start in range(0, len(records), 100):
        part = StatsAccumulator(counter)
        for rec in records[start : start + 100]:
            part.add(rec)
        merged.merge(part)
    assert merged.finalize() == whole


def test_merge_rejects_mixed_counters(tmp_path) -> None:
    from multisft.tokencount import load_subword_counter

    vocab = tmp_path / "v.txt"
    vocab.write_text("a b\n", encoding="utf-8")
    acc = StatsAccumulator(reference_counter())
    with pytest.raises(ValueError):
        acc.merge(StatsAccumulator(load_subword_counter(vocab)))


# --- per-language partition ---


def test_per_language_keys_and_counts() -> None:
    rng = random.Random(7)
    records = [random_record(rng, f"z{i}", lang="zh") for i in range(3)]
    records += [random_record(rng, f"f{i}", lang="fr") for i in range(2)]
    by_lang = per_language_stats(records, reference_counter())
    assert set(by_lang) == {"zh", "fr"}
    assert by_lang["zh"].dialogues == 3
    assert by_lang["fr"].dialogues == 2


def test_single_language_equals_overall() -> None:
    rng = random.Random(9)
    records = [random_record(rng, f"d{i}", lang="ru") for i in range(50)]
    counter = reference_counter()
    assert per_language_stats(records, counter)["ru"] == compute_stats(records, counter)


def test_partition_identity() -> None:
    rng = random.Random(13)
    records = []
    for i in range(300):
        records.append(random_record(rng, f"d{i}", lang=rng.choice(["en", "zh", "ru", "fr"])))
    counter = reference_counter()
    overall = compute_stats(records, counter)
    by_lang = per_language_stats(records, counter)
    assert sum(s.dialogues for s in by_lang.values()) == overall.dialogues
    assert sum(s.turns for s in by_lang.values()) == overall.turns


# --- rendering ---


def fixture_stats() -> CorpusStats:
    return compute_stats(fixture_records(), reference_counter())


def test_aligned_row_matches_pinned_format() -> None:
    report = render_report(fixture_stats())
    assert "2  3  20.00  50.00  70.00" in report


def test_zero_row_and_empty_flag() -> None:
    report = render_report(compute_stats([], reference_counter()))
    assert "0  0  0.00  0.00  0.00" in report
    assert "empty corpus" in report


def test_render_deterministic() -> None:
    stats = fixture_stats()
    assert render_report(stats) == render_report(stats)


def test_delimited_format() -> None:
    report = render_report(fixture_stats(), fmt="delimited")
    assert "2\t3\t20.00\t50.00\t70.00" in report
    assert "dialogues\tturns" in report


def test_unknown_format_rejected() -> None:
    with pytest.raises(ValueError):
        render_report(fixture_stats(), fmt="csv")


def test_comparison_mode_renders_labels() -> None:
    stats = fixture_stats()
    report = render_report({"zh": stats, "fr": stats})
    assert "lang" in report
    assert "zh  2  3  20.00  50.00  70.00" in report
    assert "fr  2  3  20.00  50.00  70.00" in report


def test_comparison_mode_rejects_mixed_counters() -> None:
    stats = fixture_stats()
    other = CorpusStats(1, 1, 1.0, 2.0, 3.0, "subword:v-12345678")
    with pytest.raises(ValueError) as err:
        render_report({"a": stats, "b": other})
    assert "counter" in str(err.value)


def test_counter_id_always_disclosed() -> None:
    assert "# counter: reference" in render_report(fixture_stats())
    assert "# counter: reference" in render_report(fixture_stats(), fmt="delimited")
