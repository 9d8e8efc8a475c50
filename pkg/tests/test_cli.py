"""End-to-end tests for the command-line stages, all on mock backends."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from multisft import budget, cli
from multisft.corpus import _bundled_seed_texts

EN_SEED = _bundled_seed_texts()["en"]
RU_SEED = _bundled_seed_texts()["ru"]

GEN_RULES = (
    "probe deeper\tWhy exactly did that happen?\n"
    "related aspect of the background passage\tWhat about the other side of this topic?\n"
    "opening question of a new conversation\tWhat is the main subject described here?\n"
    "Task: answer\tThe passage explains the subject in plain terms.\n"
)

JUDGE_RULES = (
    "maplewood\tCRITERIA: [3]\n"
    "Reply with exactly one line\tCRITERIA: NONE\n"
)


def words(n: int) -> str:
    return " ".join(["w"] * n)


def write_dump(path: Path, docs: list[dict]) -> None:
    path.write_text("".join(json.dumps(d) + "\n" for d in docs), encoding="utf-8")


def workspace(tmp_path: Path, seed: int = 7, target: int = 3) -> tuple[Path, Path]:
    """Write a dump, template rules, and a config; return (config_path, out_dir)."""
    out = tmp_path / "out"
    dump = tmp_path / "dump_en.jsonl"
    write_dump(dump, [
        {"id": "docA", "title": "Mills", "text": EN_SEED},
        {"id": "docB", "title": "Mills again", "text": EN_SEED[len(EN_SEED) // 2 :] + " " + EN_SEED[: len(EN_SEED) // 2]},
        {"id": "docC", "title": "Stub", "text": EN_SEED[:200]},
        {"id": "docD", "title": "Wrong language", "text": RU_SEED[:400]},
    ])
    rules = tmp_path / "gen_rules.tsv"
    rules.write_text(GEN_RULES, encoding="utf-8")
    config = tmp_path / "run.toml"
    config.write_text(
        f"""
[run]
languages = ["en"]
output_dir = "{out.as_posix()}"
seed = {seed}

[backend]
kind = "mock:template={rules.as_posix()}"

[ingest]
dumps = {{ en = "{dump.as_posix()}" }}
min_tokens = 40
max_tokens = 5000
confidence_threshold = 0.0

[segment]
min_tokens = 40
max_tokens = 80

[genchat]
target_count = {target}
""",
        encoding="utf-8",
    )
    return config, out


def read_log(out: Path) -> list[dict]:
    text = (out / "run.log.jsonl").read_text(encoding="utf-8")
    return [json.loads(line) for line in text.splitlines() if line]


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]


def dialogue_record(rec_id: str, texts: list[str], lang: str = "en",
                    category: str = "lang_specific_chat", origin: str = "generated") -> dict:
    turns = [
        {"role": "question" if i % 2 == 0 else "answer", "text": text}
        for i, text in enumerate(texts)
    ]
    return {
        "id": rec_id,
        "lang": lang,
        "category": category,
        "origin": origin,
        "source_ref": "docA:0",
        "seed": 7,
        "turns": turns,
        "followup_kinds": ["indepth"] * (len(turns) // 2 - 1),
        "flags": [],
    }


# --- ingest / segment ---


def test_ingest_keeps_docs_and_logs_drops(tmp_path: Path) -> None:
    config, out = workspace(tmp_path)
    assert cli.main(["ingest", "--config", str(config)]) == 0
    clean = read_jsonl(out / "clean_docs.jsonl")
    assert [d["id"] for d in clean] == ["docA", "docB"]
    assert all(d["lang"] == "en" and 40 <= d["token_count"] <= 5000 for d in clean)
    drops = read_jsonl(out / "drops_ingest.jsonl")
    reasons = {d["doc_id"]: d["reason"] for d in drops}
    assert reasons["docC"] == "too_short"
    assert reasons["docD"].startswith("langid_mismatch:")
    entry = read_log(out)[-1]
    assert entry["stage"] == "ingest"
    assert entry["input_count"] == 4
    assert entry["output_count"] == 2
    assert entry["drops"]["too_short"] == 1
    assert len(entry["config_digest"]) == 64


def test_ingest_limit_caps_docs(tmp_path: Path) -> None:
    config, out = workspace(tmp_path)
    assert cli.main(["ingest", "--config", str(config), "--limit", "2"]) == 0
    assert read_log(out)[-1]["input_count"] == 2
    assert [d["id"] for d in read_jsonl(out / "clean_docs.jsonl")] == ["docA", "docB"]


def test_segment_matches_direct_library_calls(tmp_path: Path) -> None:
    config, out = workspace(tmp_path)
    assert cli.main(["ingest", "--config", str(config)]) == 0
    assert cli.main(["segment", "--config", str(config)]) == 0
    from multisft.corpus import CleanDocument, segment_document
    from multisft.tokencount import reference_counter

    counter = reference_counter()
    expected = []
    for rec in read_jsonl(out / "clean_docs.jsonl"):
        doc = CleanDocument(**rec)
        expected.extend(s.text for s in segment_document(doc, counter, 40, 80))
    got = [s["text"] for s in read_jsonl(out / "segments.jsonl")]
    assert got == expected
    assert all(s["lang"] == "en" for s in read_jsonl(out / "segments.jsonl"))


# --- exit codes ---


def test_invalid_field_exits_2_with_path(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    config, _ = workspace(tmp_path)
    config.write_text(config.read_text(encoding="utf-8") + "p_indepth = 1.5\n", encoding="utf-8")
    assert cli.main(["genchat", "--config", str(config)]) == 2
    assert "genchat.p_indepth" in capsys.readouterr().err


def test_unparseable_toml_exits_2(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    config = tmp_path / "bad.toml"
    config.write_text("run = [unclosed\n", encoding="utf-8")
    assert cli.main(["stats", "--config", str(config)]) == 2
    assert "not valid TOML" in capsys.readouterr().err


def test_unknown_language_exits_2(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    config = tmp_path / "run.toml"
    config.write_text('[run]\nlanguages = ["tlh"]\n', encoding="utf-8")
    assert cli.main(["ingest", "--config", str(config)]) == 2
    assert "run.languages" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path: Path) -> None:
    assert cli.main(["ingest", "--config", str(tmp_path / "nope.toml")]) == 2


def test_missing_dump_exits_2(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    config, _ = workspace(tmp_path)
    (tmp_path / "dump_en.jsonl").unlink()
    assert cli.main(["ingest", "--config", str(config)]) == 2
    assert "ingest.dumps.en" in capsys.readouterr().err


def test_missing_upstream_artifact_exits_3(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    config, _ = workspace(tmp_path)
    assert cli.main(["segment", "--config", str(config)]) == 3
    err = capsys.readouterr().err
    assert "clean_docs.jsonl" in err and "ingest" in err


def test_sample_without_inputs_exits_3(tmp_path: Path) -> None:
    config, _ = workspace(tmp_path)
    assert cli.main(["sample", "--config", str(config)]) == 3


# --- genchat ---


def run_through_genchat(config: Path) -> None:
    for stage in ("ingest", "segment", "genchat"):
        assert cli.main([stage, "--config", str(config)]) == 0


def test_genchat_produces_target_dialogues(tmp_path: Path) -> None:
    config, out = workspace(tmp_path, target=3)
    run_through_genchat(config)
    recs = read_jsonl(out / "dialogues_generated.jsonl")
    assert [r["id"] for r in recs] == ["en-ls-000000", "en-ls-000001", "en-ls-000002"]
    assert all(r["lang"] == "en" and r["origin"] == "generated" for r in recs)
    assert all(r["turns"][0]["text"] == "What is the main subject described here?" for r in recs)
    entry = read_log(out)[-1]
    assert entry["stage"] == "genchat"
    assert entry["output_count"] == 3
    assert entry["failures"] == 0


def test_genchat_rerun_is_byte_identical_and_cached(tmp_path: Path) -> None:
    config, out = workspace(tmp_path)
    run_through_genchat(config)
    first = (out / "dialogues_generated.jsonl").read_bytes()
    (out / "dialogues_generated.jsonl").unlink()
    assert cli.main(["genchat", "--config", str(config)]) == 0
    assert (out / "dialogues_generated.jsonl").read_bytes() == first
    rerun = read_log(out)[-1]
    assert rerun["cache_misses"] == 0
    assert rerun["cache_hits"] > 0
    assert rerun["cache_hit_rate"] == 1.0


def test_seed_flag_changes_digest(tmp_path: Path) -> None:
    config, out = workspace(tmp_path)
    run_through_genchat(config)
    assert cli.main(["genchat", "--config", str(config), "--seed", "8"]) == 0
    log = read_log(out)
    assert log[-1]["config_digest"] != log[-2]["config_digest"]


def test_log_path_not_part_of_digest(tmp_path: Path) -> None:
    config, out = workspace(tmp_path)
    run_through_genchat(config)
    assert cli.main(["genchat", "--config", str(config), "--log", str(tmp_path / "other.log")]) == 0
    base = read_log(out)[-1]["config_digest"]
    other = json.loads((tmp_path / "other.log").read_text(encoding="utf-8").splitlines()[-1])
    assert other["config_digest"] == base


def test_scripted_backend_running_dry_is_not_fatal(tmp_path: Path) -> None:
    config, out = workspace(tmp_path, target=2)
    for stage in ("ingest", "segment"):
        assert cli.main([stage, "--config", str(config)]) == 0
    replies = tmp_path / "replies.txt"
    replies.write_text("only one question\n", encoding="utf-8")
    assert cli.main([
        "genchat", "--config", str(config), "--backend", f"mock:scripted={replies.as_posix()}",
    ]) == 0
    entry = read_log(out)[-1]
    assert entry["output_count"] == 0
    assert entry["failures"] > 0


# --- filter ---


def test_filter_splits_prefilter_and_judge_drops(tmp_path: Path) -> None:
    config, out = workspace(tmp_path)
    out.mkdir(parents=True, exist_ok=True)
    records = [
        dialogue_record("d-london", [
            "Tell me about the old bridge.",
            "The bridge over the Thames in London is very old.",
        ]),
        dialogue_record("d-maple", [
            "What happens at the maplewood festival?",
            "People gather at the maplewood festival each spring.",
        ]),
        dialogue_record("d-plain", [
            "How tall is the water tower?",
            "It rises thirty meters above the village.",
        ]),
    ]
    (out / "dialogues_generated.jsonl").write_text(
        "".join(json.dumps(r) + "\n" for r in records), encoding="utf-8"
    )
    judge_rules = tmp_path / "judge_rules.tsv"
    judge_rules.write_text(JUDGE_RULES, encoding="utf-8")
    assert cli.main([
        "filter", "--config", str(config), "--backend", f"mock:template={judge_rules.as_posix()}",
    ]) == 0
    kept = read_jsonl(out / "dialogues_kept.jsonl")
    assert [r["id"] for r in kept] == ["d-plain"]
    assert kept[0] == records[2]
    dropped = read_jsonl(out / "dialogues_dropped.jsonl")
    verdicts = {d["verdict"]["dialogue_id"]: d["verdict"] for d in dropped}
    assert verdicts["d-london"]["stage"] == "prefilter"
    assert verdicts["d-london"]["matched_criteria"] == [2]
    assert verdicts["d-maple"]["stage"] == "judge"
    assert verdicts["d-maple"]["matched_criteria"] == [3]
    entry = read_log(out)[-1]
    assert entry["criterion_histogram"] == {"2": 1, "3": 1}
    assert entry["parse_failed"] == 0


# --- translate ---


def test_translate_echo_produces_identity_per_target(tmp_path: Path) -> None:
    config, out = workspace(tmp_path)
    out.mkdir(parents=True, exist_ok=True)
    config.write_text(
        config.read_text(encoding="utf-8") + '\n[translate]\ntarget_langs = ["fr", "es"]\n',
        encoding="utf-8",
    )
    source = dialogue_record("d1", [
        "How does the equation $E = mc^2$ read?",
        "It relates energy to mass.",
    ])
    (out / "dialogues_kept.jsonl").write_text(json.dumps(source) + "\n", encoding="utf-8")
    assert cli.main(["translate", "--config", str(config), "--backend", "mock:echo"]) == 0
    recs = read_jsonl(out / "dialogues_translated.jsonl")
    assert [r["id"] for r in recs] == ["d1/fr", "d1/es"]
    assert all(r["origin"] == "translated" for r in recs)
    assert all(
        [t["text"] for t in r["turns"]] == [t["text"] for t in source["turns"]] for r in recs
    )
    assert all(r["flags"] == [] for r in recs)
    entry = read_log(out)[-1]
    assert entry["per_language"] == {"fr": 1, "es": 1}
    assert entry["flagged"] == 0


def test_translate_lang_flag_restricts_targets(tmp_path: Path) -> None:
    config, out = workspace(tmp_path)
    out.mkdir(parents=True, exist_ok=True)
    source = dialogue_record("d1", ["A question?", "An answer."])
    (out / "dialogues_kept.jsonl").write_text(json.dumps(source) + "\n", encoding="utf-8")
    assert cli.main([
        "translate", "--config", str(config), "--backend", "mock:echo", "--lang", "fr",
    ]) == 0
    assert [r["id"] for r in read_jsonl(out / "dialogues_translated.jsonl")] == ["d1/fr"]


# --- sample / sweep ---


def test_sample_applies_overrides_per_cell(tmp_path: Path) -> None:
    config, out = workspace(tmp_path)
    out.mkdir(parents=True, exist_ok=True)
    config.write_text(
        config.read_text(encoding="utf-8")
        + '\n[sample.overrides]\n"en/lang_specific_chat" = 2\n"fr/lang_specific_chat" = 2\n',
        encoding="utf-8",
    )
    generated = [dialogue_record(f"g{i}", ["Q?", "A."]) for i in range(4)]
    translated = [
        dialogue_record(f"t{i}", ["Q?", "A."], lang="fr", origin="translated") for i in range(3)
    ]
    (out / "dialogues_generated.jsonl").write_text(
        "".join(json.dumps(r) + "\n" for r in generated), encoding="utf-8"
    )
    (out / "dialogues_translated.jsonl").write_text(
        "".join(json.dumps(r) + "\n" for r in translated), encoding="utf-8"
    )
    assert cli.main(["sample", "--config", str(config)]) == 0
    sampled = read_jsonl(out / "sampled.jsonl")
    want_en = set(budget.sample_subset([f"g{i}" for i in range(4)], 2, 7))
    want_fr = set(budget.sample_subset([f"t{i}" for i in range(3)], 2, 7))
    assert {r["id"] for r in sampled} == want_en | want_fr
    ids = [r["id"] for r in sampled]
    assert ids == [r["id"] for r in generated + translated if r["id"] in want_en | want_fr]
    cells = {(c["lang"], c["category"]): c for c in read_log(out)[-1]["cells"]}
    assert cells[("en", "lang_specific_chat")]["sampled"] == 2
    assert cells[("fr", "lang_specific_chat")]["available"] == 3


def test_sweep_writes_nested_manifests_and_eval_table(tmp_path: Path) -> None:
    config, out = workspace(tmp_path)
    out.mkdir(parents=True, exist_ok=True)
    points = tmp_path / "points.txt"
    points.write_text("2 from_en_sft 45.6\n64000 from_en_sft 22.0\n", encoding="utf-8")
    config.write_text(
        config.read_text(encoding="utf-8")
        + f'\n[sweep]\nladder = [2, 4]\neval_points = "{points.as_posix()}"\n'
        + '[[sweep.cells]]\nlang = "en"\ncategory = "math"\nmode = "from_en_sft"\n',
        encoding="utf-8",
    )
    records = [dialogue_record(f"m{i}", ["Q?", "A."], category="math") for i in range(6)]
    (out / "sampled.jsonl").write_text(
        "".join(json.dumps(r) + "\n" for r in records), encoding="utf-8"
    )
    assert cli.main(["sweep", "--config", str(config)]) == 0
    cell_dir = out / "sweep" / "en_math_from_en_sft"
    manifest = (cell_dir / "manifest.txt").read_text(encoding="utf-8")
    assert "mode: from_en_sft" in manifest
    assert "initialization: start from the English-SFT checkpoint" in manifest
    small = (cell_dir / "subset_0000002.txt").read_text(encoding="utf-8").split()
    large = (cell_dir / "subset_0000004.txt").read_text(encoding="utf-8").split()
    assert set(small) <= set(large)
    assert (len(small), len(large)) == (2, 4)
    table = (cell_dir / "eval_table.txt").read_text(encoding="utf-8")
    assert "2\tfrom_en_sft\t45.6" in table
    entry = read_log(out)[-1]
    assert entry["manifests"][0]["eval_rows"] == 1
    assert len(entry["manifests"][0]["eval_rejected"]) == 1


def test_sweep_without_cells_exits_2(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    config, out = workspace(tmp_path)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sampled.jsonl").write_text(
        json.dumps(dialogue_record("m0", ["Q?", "A."])) + "\n", encoding="utf-8"
    )
    assert cli.main(["sweep", "--config", str(config)]) == 2
    assert "sweep.cells" in capsys.readouterr().err


# --- stats ---


def test_stats_report_pins_and_falls_back_to_generated(tmp_path: Path) -> None:
    config, out = workspace(tmp_path)
    out.mkdir(parents=True, exist_ok=True)
    records = [
        dialogue_record("s1", [words(10), words(40), words(20), words(60)]),
        dialogue_record("s2", [words(30), words(50)]),
    ]
    (out / "dialogues_generated.jsonl").write_text(
        "".join(json.dumps(r) + "\n" for r in records), encoding="utf-8"
    )
    assert cli.main(["stats", "--config", str(config)]) == 0
    report = (out / "report.txt").read_text(encoding="utf-8")
    assert report.startswith("# counter: ")
    assert "2  3  20.00  50.00  70.00" in report.splitlines()
    entry = read_log(out)[-1]
    assert entry["input"].endswith("dialogues_generated.jsonl")
    assert entry["dialogues"] == 2
    assert entry["turns"] == 3
    assert entry["avg_turn_tokens"] == pytest.approx(70.0)


def test_chain_through_stats_offline(tmp_path: Path) -> None:
    config, out = workspace(tmp_path, target=2)
    for stage in ("ingest", "segment", "genchat", "stats"):
        assert cli.main([stage, "--config", str(config)]) == 0
    assert (out / "report.txt").is_file()
    entry = read_log(out)[-1]
    assert entry["stage"] == "stats"
    assert entry["dialogues"] == 2
    assert entry["rejects"] == 0
