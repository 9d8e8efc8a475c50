"""Command-line orchestrator: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from itertools import islice
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import budget as budget_mod
from . import stats as stats_mod
from . import xfilter, xlate
from .backend import (
    CachingBackend,
    EchoBackend,
    HttpBackend,
    RateLimiter,
    RetryPolicy,
    ScriptedBackend,
    TemplateBackend,
)
from .corpus import (
    SUPPORTED_LANGS,
    CleanDocument,
    RawDocument,
    Segment,
    classify_language,
    default_classifier,
    filter_by_length,
    normalize_script,
    parse_dump_stream,
    segment_document,
)
from .genchat import (
    dialogue_to_record,
    load_language_assets,
    record_to_dialogue,
    run_generation,
    validate_dialogue_record,
)
from .tokencount import TokenCounter, load_subword_counter, reference_counter

logger = logging.getLogger(__name__)

STAGES = ("ingest", "segment", "genchat", "filter", "translate", "sample", "sweep", "stats")

CLEAN_DOCS = "clean_docs.jsonl"
SEGMENTS = "segments.jsonl"
GENERATED = "dialogues_generated.jsonl"
KEPT = "dialogues_kept.jsonl"
DROPPED = "dialogues_dropped.jsonl"
TRANSLATED = "dialogues_translated.jsonl"
SAMPLED = "sampled.jsonl"


class ConfigError(Exception):
    """Invalid configuration; `path` is the dotted field path for diagnostics."""

    def __init__(self, path: str, message: str) -> None:
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


class MissingArtifact(Exception):
    def __init__(self, path: Path, producer: str) -> None:
        self.path = path
        self.producer = producer
        super().__init__(f"{path} (produce it with the '{producer}' stage first)")


# --- configuration ---


def _section(raw: dict[str, Any], name: str) -> dict[str, Any]:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(name, "expected a table")
    return value


def _field(
    section: dict[str, Any],
    section_name: str,
    key: str,
    default: Any,
    kinds: tuple[type, ...],
    check: Callable[[Any], bool] | None = None,
    check_msg: str = "",
) -> Any:
    value = section.get(key, default)
    if float in kinds and type(value) is int and type(default) is not bool:
        value = float(value)
    if type(value) not in kinds:
        raise ConfigError(
            f"{section_name}.{key}",
            f"expected {'/'.join(k.__name__ for k in kinds)}, got {type(value).__name__}",
        )
    if check is not None and not check(value):
        raise ConfigError(f"{section_name}.{key}", f"{check_msg}, got {value!r}")
    return value


def _str_list(section: dict[str, Any], section_name: str, key: str, default: list[str]) -> list[str]:
    value = section.get(key, default)
    if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
        raise ConfigError(f"{section_name}.{key}", "expected a list of strings")
    return list(value)


def load_raw_config(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("--config", f"file not found: {p}")
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(str(p), f"not valid TOML: {err}") from err


def validate_config(raw: dict[str, Any], args: argparse.Namespace | None = None) -> dict[str, Any]:
    """Normalize the raw TOML into a complete effective config, applying flag overrides."""
    run = _section(raw, "run")
    languages = _str_list(run, "run", "languages", ["en"])
    if args is not None and args.lang:
        languages = [args.lang]
    if not languages:
        raise ConfigError("run.languages", "at least one language required")
    for lang in languages:
        if lang not in SUPPORTED_LANGS:
            raise ConfigError("run.languages", f"unsupported language {lang!r}")
    seed = _field(run, "run", "seed", 0, (int,))
    if args is not None and args.seed is not None:
        seed = args.seed
    log_path = _field(run, "run", "log", "", (str,))
    if args is not None and args.log:
        log_path = args.log

    backend = _section(raw, "backend")
    kind = _field(backend, "backend", "kind", "mock:echo", (str,))
    if args is not None and args.backend:
        kind = args.backend
    if kind != "http" and not kind.startswith("mock:"):
        raise ConfigError("backend.kind", f"expected 'http' or 'mock:...', got {kind!r}")
    parallelism = _field(backend, "backend", "parallelism", 1, (int,),
                         lambda v: v >= 1, "expected >= 1")
    if args is not None and args.parallelism is not None:
        if args.parallelism < 1:
            raise ConfigError("--parallelism", f"expected >= 1, got {args.parallelism}")
        parallelism = args.parallelism
    temps = _section(backend, "temperatures") if "temperatures" in backend else {}
    temperatures = {
        "genchat": _field(temps, "backend.temperatures", "genchat", 0.7, (float,),
                          lambda v: v >= 0, "expected >= 0"),
        "filter": _field(temps, "backend.temperatures", "filter", 0.0, (float,),
                         lambda v: v >= 0, "expected >= 0"),
        "translate": _field(temps, "backend.temperatures", "translate", 0.0, (float,),
                            lambda v: v >= 0, "expected >= 0"),
    }

    paths = _section(raw, "paths")
    ingest = _section(raw, "ingest")
    dumps = ingest.get("dumps", {})
    if not isinstance(dumps, dict) or any(
        not isinstance(k, str) or not isinstance(v, str) for k, v in dumps.items()
    ):
        raise ConfigError("ingest.dumps", "expected a table of language -> path")
    min_doc = _field(ingest, "ingest", "min_tokens", 1000, (int,), lambda v: v > 0, "expected > 0")
    max_doc = _field(ingest, "ingest", "max_tokens", 10_000, (int,),
                     lambda v: v >= min_doc, "expected >= min_tokens")
    seg = _section(raw, "segment")
    min_seg = _field(seg, "segment", "min_tokens", 1000, (int,), lambda v: v > 0, "expected > 0")
    max_seg = _field(seg, "segment", "max_tokens", 2000, (int,),
                     lambda v: v >= min_seg, "expected >= min_tokens")

    gen = _section(raw, "genchat")
    n_lo = _field(gen, "genchat", "n_turns_min", 2, (int,), lambda v: v >= 1, "expected >= 1")
    n_hi = _field(gen, "genchat", "n_turns_max", 4, (int,),
                  lambda v: v >= n_lo, "expected >= n_turns_min")
    targets = gen.get("targets", {})
    if not isinstance(targets, dict) or any(
        not isinstance(k, str) or type(v) is not int or v < 0 for k, v in targets.items()
    ):
        raise ConfigError("genchat.targets", "expected a table of language -> nonnegative count")

    sample = _section(raw, "sample")
    overrides_raw = sample.get("overrides", {})
    if not isinstance(overrides_raw, dict):
        raise ConfigError("sample.overrides", "expected a table of 'lang/category' -> count")
    sample_overrides: dict[str, int] = {}
    for key, value in overrides_raw.items():
        if not isinstance(key, str) or key.count("/") != 1 or type(value) is not int or value < 0:
            raise ConfigError(
                f"sample.overrides.{key}", "expected 'lang/category' -> nonnegative integer"
            )
        sample_overrides[key] = value

    sweep = _section(raw, "sweep")
    cells_raw = sweep.get("cells", [])
    if not isinstance(cells_raw, list):
        raise ConfigError("sweep.cells", "expected an array of {lang, category, mode} tables")
    cells = []
    for i, cell in enumerate(cells_raw):
        if not isinstance(cell, dict) or not {"lang", "category", "mode"} <= set(cell):
            raise ConfigError(f"sweep.cells[{i}]", "expected keys lang, category, mode")
        if cell["mode"] not in budget_mod.MODES:
            raise ConfigError(f"sweep.cells[{i}].mode", f"expected one of {budget_mod.MODES}")
        cells.append({"lang": cell["lang"], "category": cell["category"], "mode": cell["mode"]})
    ladder = sweep.get("ladder", list(budget_mod.DEFAULT_LADDER))
    if (
        not isinstance(ladder, list)
        or any(type(b) is not int or b <= 0 for b in ladder)
        or ladder != sorted(set(ladder))
    ):
        raise ConfigError("sweep.ladder", "expected an ascending list of positive integers")

    xl = _section(raw, "translate")
    target_langs = _str_list(xl, "translate", "target_langs", list(xlate.TARGET_LANGS))
    if args is not None and args.lang and args.stage == "translate":
        target_langs = [args.lang]
    for lang in target_langs:
        if lang not in xlate.TARGET_LANGS:
            raise ConfigError("translate.target_langs", f"unsupported target {lang!r}")

    flt = _section(raw, "filter")
    st = _section(raw, "stats")

    cfg = {
        "run": {
            "languages": languages,
            "output_dir": _field(run, "run", "output_dir", "out", (str,)),
            "seed": seed,
            "log": log_path,
            "vocab": _field(run, "run", "vocab", "", (str,)),
        },
        "paths": {
            "cache_dir": _field(paths, "paths", "cache_dir", "", (str,)),
            "assets_dir": _field(paths, "paths", "assets_dir", "", (str,)),
        },
        "backend": {
            "kind": kind,
            "base_url": _field(backend, "backend", "base_url", "", (str,)),
            "model": _field(backend, "backend", "model", "default", (str,)),
            "api_key_env": _field(backend, "backend", "api_key_env", "MULTISFT_API_KEY", (str,)),
            "parallelism": parallelism,
            "requests_per_minute": _field(backend, "backend", "requests_per_minute", 0, (int,),
                                          lambda v: v >= 0, "expected >= 0"),
            "timeout": _field(backend, "backend", "timeout", 120.0, (float,),
                              lambda v: v > 0, "expected > 0"),
            "temperatures": temperatures,
        },
        "ingest": {
            "dumps": dict(dumps),
            "min_tokens": min_doc,
            "max_tokens": max_doc,
            "confidence_threshold": _field(ingest, "ingest", "confidence_threshold", 0.65,
                                           (float,), lambda v: 0 <= v <= 1,
                                           "expected within [0, 1]"),
        },
        "segment": {
            "min_tokens": min_seg,
            "max_tokens": max_seg,
            "input": _field(seg, "segment", "input", "", (str,)),
        },
        "genchat": {
            "target_count": _field(gen, "genchat", "target_count", 10, (int,),
                                   lambda v: v >= 0, "expected >= 0"),
            "targets": dict(targets),
            "n_turns_min": n_lo,
            "n_turns_max": n_hi,
            "p_indepth": _field(gen, "genchat", "p_indepth", 0.5, (float,),
                                lambda v: 0 <= v <= 1, "expected within [0, 1]"),
            "dialogues_per_segment": _field(gen, "genchat", "dialogues_per_segment", 1, (int,),
                                            lambda v: v >= 1, "expected >= 1"),
            "max_output_tokens": _field(gen, "genchat", "max_output_tokens", 0, (int,),
                                        lambda v: v >= 0, "expected >= 0"),
            "doc_close": _field(gen, "genchat", "doc_close", "", (str,)),
            "input": _field(gen, "genchat", "input", "", (str,)),
        },
        "filter": {
            "budget": _field(flt, "filter", "budget", 3000, (int,),
                             lambda v: v > 0, "expected > 0"),
            "input": _field(flt, "filter", "input", "", (str,)),
            "lexicon_dir": _field(flt, "filter", "lexicon_dir", "", (str,)),
            "judge_template": _field(flt, "filter", "judge_template", "", (str,)),
        },
        "translate": {
            "target_langs": target_langs,
            "input": _field(xl, "translate", "input", "", (str,)),
        },
        "sample": {
            "inputs": _str_list(sample, "sample", "inputs", []),
            "overrides": sample_overrides,
        },
        "sweep": {
            "input": _field(sweep, "sweep", "input", "", (str,)),
            "cells": cells,
            "ladder": list(ladder),
            "eval_points": _field(sweep, "sweep", "eval_points", "", (str,)),
        },
        "stats": {
            "input": _field(st, "stats", "input", "", (str,)),
            "format": _field(st, "stats", "format", "aligned_table", (str,),
                             lambda v: v in ("aligned_table", "delimited"),
                             "expected aligned_table or delimited"),
        },
    }
    return cfg


def config_digest(cfg: dict[str, Any]) -> str:
    """Digest of every semantically meaningful field (the log path is presentation-only)."""
    significant = json.loads(json.dumps(cfg))
    significant["run"].pop("log", None)
    payload = json.dumps(significant, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# --- shared plumbing ---


def _make_counter(cfg: dict[str, Any]) -> TokenCounter:
    vocab = cfg["run"]["vocab"]
    if not vocab:
        return reference_counter()
    try:
        return load_subword_counter(vocab)
    except (FileNotFoundError, ValueError) as err:
        raise ConfigError("run.vocab", str(err)) from err


def _unescape(text: str) -> str:
    return text.replace("\\t", "\t").replace("\\n", "\n")


def _make_backend(cfg: dict[str, Any], out_dir: Path) -> CachingBackend:
    b = cfg["backend"]
    kind = b["kind"]
    if kind == "http":
        if not b["base_url"]:
            raise ConfigError("backend.base_url", "required for the http backend")
        try:
            inner: Any = HttpBackend(
                base_url=b["base_url"],
                model=b["model"],
                api_key_env=b["api_key_env"],
                retry=RetryPolicy(),
                rate_limiter=(
                    RateLimiter(b["requests_per_minute"]) if b["requests_per_minute"] else None
                ),
                timeout=b["timeout"],
            )
        except ValueError as err:
            raise ConfigError("backend.api_key_env", str(err)) from err
    elif kind == "mock:echo":
        inner = EchoBackend()
    elif kind.startswith("mock:scripted="):
        path = Path(kind.split("=", 1)[1])
        if not path.is_file():
            raise ConfigError("backend.kind", f"scripted replies file not found: {path}")
        replies = [_unescape(line) for line in path.read_text(encoding="utf-8").splitlines()
                   if line]
        if not replies:
            raise ConfigError("backend.kind", f"scripted replies file is empty: {path}")
        inner = ScriptedBackend(replies)
    elif kind.startswith("mock:template="):
        path = Path(kind.split("=", 1)[1])
        if not path.is_file():
            raise ConfigError("backend.kind", f"template rules file not found: {path}")
        rules = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line:
                continue
            if "\t" not in line:
                raise ConfigError(
                    "backend.kind", f"{path} line {lineno}: expected 'pattern<TAB>reply'"
                )
            pattern, reply = line.split("\t", 1)
            rules.append((pattern, _unescape(reply)))
        inner = TemplateBackend(rules)
    else:
        raise ConfigError("backend.kind", f"unknown backend kind {kind!r}")
    cache_dir = Path(cfg["paths"]["cache_dir"]) if cfg["paths"]["cache_dir"] else out_dir / "cache"
    return CachingBackend(inner, cache_dir)


def _cache_fields(backend: CachingBackend) -> dict[str, Any]:
    snap = backend.stats.snapshot()
    hits = snap.get("cache_hits", 0)
    misses = snap.get("cache_misses", 0)
    total = hits + misses
    return {
        "cache_hits": hits,
        "cache_misses": misses,
        "cache_hit_rate": round(hits / total, 4) if total else 0.0,
    }


def _assets_subdir(cfg: dict[str, Any], name: str) -> Path | None:
    root = cfg["paths"]["assets_dir"]
    if not root:
        return None
    path = Path(root) / name
    if not path.is_dir():
        raise ConfigError("paths.assets_dir", f"missing asset directory: {path}")
    return path


def read_jsonl(path: Path, producer: str) -> Iterator[dict[str, Any]]:
    if not path.is_file():
        raise MissingArtifact(path, producer)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path: Path, records: Iterable[dict[str, Any]]) -> int:
    tmp = path.with_suffix(path.suffix + ".tmp")
    count = 0
    with open(tmp, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True,
                                separators=(",", ":")))
            fh.write("\n")
            count += 1
    tmp.replace(path)
    return count


def _limited(records: Iterator[dict[str, Any]], args: argparse.Namespace) -> Iterator[dict[str, Any]]:
    if args.limit is not None:
        if args.limit < 0:
            raise ConfigError("--limit", f"expected >= 0, got {args.limit}")
        return islice(records, args.limit)
    return records


def _resolve_input(
    explicit: str, out_dir: Path, defaults: list[str], producer: str
) -> Path:
    if explicit:
        path = Path(explicit)
        if not path.is_file():
            raise MissingArtifact(path, producer)
        return path
    for name in defaults:
        path = out_dir / name
        if path.is_file():
            return path
    raise MissingArtifact(out_dir / defaults[0], producer)


# --- stages ---


def stage_ingest(cfg: dict[str, Any], args: argparse.Namespace, out_dir: Path) -> dict[str, Any]:
    counter = _make_counter(cfg)
    ing = cfg["ingest"]
    classifier = default_classifier(ing["confidence_threshold"])
    clean: list[dict[str, Any]] = []
    drops: list[dict[str, Any]] = []
    drop_hist: dict[str, int] = {}
    rejects = 0
    parsed = 0

    def drop(doc_id: str, stage: str, reason: str) -> None:
        drops.append({"doc_id": doc_id, "stage": stage, "reason": reason})
        bucket = reason.split(":", 1)[0]
        drop_hist[bucket] = drop_hist.get(bucket, 0) + 1

    for lang in cfg["run"]["languages"]:
        if lang not in ing["dumps"]:
            raise ConfigError(f"ingest.dumps.{lang}", "no dump path configured")
        dump_path = Path(ing["dumps"][lang])
        if not dump_path.is_file():
            raise ConfigError(f"ingest.dumps.{lang}", f"file not found: {dump_path}")
        reject_lines: list[Any] = []
        with open(dump_path, encoding="utf-8") as fh:
            docs = parse_dump_stream(fh, expected_lang=lang, on_reject=reject_lines.append)
            if args.limit is not None:
                docs = islice(docs, args.limit)
            for raw_doc in docs:
                parsed += 1
                if not raw_doc.text.strip():
                    drop(raw_doc.id, "langid", "empty_text")
                    continue
                predicted, confidence = classify_language(classifier, raw_doc.text)
                if predicted != lang:
                    drop(raw_doc.id, "langid", f"langid_mismatch:{predicted}")
                    continue
                if confidence < classifier.confidence_threshold:
                    drop(raw_doc.id, "langid", f"langid_low_confidence:{confidence:.3f}")
                    continue
                normalized = dataclasses.replace(
                    raw_doc, text=normalize_script(raw_doc.text, lang)
                )
                result = filter_by_length(
                    normalized, counter, ing["min_tokens"], ing["max_tokens"]
                )
                if isinstance(result, CleanDocument):
                    clean.append(dataclasses.asdict(result))
                else:
                    drop(result.doc_id, result.stage, result.reason)
        rejects += len(reject_lines)

    out_count = write_jsonl(out_dir / CLEAN_DOCS, clean)
    write_jsonl(out_dir / "drops_ingest.jsonl", drops)
    print(f"[ingest] {parsed} docs in, {out_count} kept -> {out_dir / CLEAN_DOCS}")
    return {
        "input_count": parsed,
        "output_count": out_count,
        "rejected_lines": rejects,
        "drops": drop_hist,
    }


def stage_segment(cfg: dict[str, Any], args: argparse.Namespace, out_dir: Path) -> dict[str, Any]:
    counter = _make_counter(cfg)
    seg_cfg = cfg["segment"]
    in_path = _resolve_input(seg_cfg["input"], out_dir, [CLEAN_DOCS], "ingest")
    records: list[dict[str, Any]] = []
    docs = 0
    truncated = 0
    for rec in _limited(read_jsonl(in_path, "ingest"), args):
        docs += 1
        doc = CleanDocument(
            id=rec["id"], lang=rec["lang"], title=rec.get("title", ""), text=rec["text"],
            token_count=rec["token_count"], counter_id=rec["counter_id"],
        )
        for segment in segment_document(doc, counter, seg_cfg["min_tokens"],
                                        seg_cfg["max_tokens"]):
            truncated += int(segment.truncated_flag)
            records.append({
                "doc_id": segment.doc_id,
                "lang": doc.lang,
                "seg_index": segment.seg_index,
                "text": segment.text,
                "token_count": segment.token_count,
                "truncated_flag": segment.truncated_flag,
            })
    out_count = write_jsonl(out_dir / SEGMENTS, records)
    print(f"[segment] {docs} docs in, {out_count} segments -> {out_dir / SEGMENTS}")
    return {
        "input_count": docs,
        "output_count": out_count,
        "truncated_segments": truncated,
    }


def stage_genchat(cfg: dict[str, Any], args: argparse.Namespace, out_dir: Path) -> dict[str, Any]:
    counter = _make_counter(cfg)
    gen = cfg["genchat"]
    languages = cfg["run"]["languages"]
    try:
        assets = load_language_assets(
            languages,
            assets_dir=_assets_subdir(cfg, "prompts"),
            doc_close=gen["doc_close"] or None,
        )
    except ValueError as err:
        raise ConfigError("genchat.assets", str(err)) from err
    backend = _make_backend(cfg, out_dir)
    in_path = _resolve_input(gen["input"], out_dir, [SEGMENTS], "segment")
    by_lang: dict[str, list[Segment]] = {lang: [] for lang in languages}
    seg_count = 0
    for rec in _limited(read_jsonl(in_path, "segment"), args):
        seg_count += 1
        lang = rec.get("lang")
        if lang in by_lang:
            by_lang[lang].append(Segment(
                doc_id=rec["doc_id"], seg_index=rec["seg_index"], text=rec["text"],
                token_count=rec["token_count"], truncated_flag=rec["truncated_flag"],
            ))
    records: list[dict[str, Any]] = []
    per_lang: dict[str, int] = {}
    failure_count = 0
    for lang in languages:
        target = gen["targets"].get(lang, gen["target_count"])
        dialogues, failures = run_generation(
            by_lang[lang],
            assets[lang],
            backend,
            target_count=target,
            global_seed=cfg["run"]["seed"],
            n_turns_range=(gen["n_turns_min"], gen["n_turns_max"]),
            p_indepth=gen["p_indepth"],
            dialogues_per_segment=gen["dialogues_per_segment"],
            parallelism=cfg["backend"]["parallelism"],
            model=cfg["backend"]["model"],
            temperature=cfg["backend"]["temperatures"]["genchat"],
            max_output_tokens=gen["max_output_tokens"] or None,
            counter=counter,
        )
        per_lang[lang] = len(dialogues)
        failure_count += len(failures)
        records.extend(dialogue_to_record(d) for d in dialogues)
    out_count = write_jsonl(out_dir / GENERATED, records)
    print(f"[genchat] {seg_count} segments in, {out_count} dialogues -> {out_dir / GENERATED}")
    return {
        "input_count": seg_count,
        "output_count": out_count,
        "per_language": per_lang,
        "failures": failure_count,
        **_cache_fields(backend),
    }


def stage_filter(cfg: dict[str, Any], args: argparse.Namespace, out_dir: Path) -> dict[str, Any]:
    counter = _make_counter(cfg)
    flt = cfg["filter"]
    if flt["lexicon_dir"] and not Path(flt["lexicon_dir"]).is_dir():
        raise ConfigError("filter.lexicon_dir", f"not a directory: {flt['lexicon_dir']}")
    try:
        lexicon_dir = flt["lexicon_dir"] or _assets_subdir(cfg, "filter/lexicons")
        lexicons = xfilter.load_lexicons(lexicon_dir)
        template_path = flt["judge_template"] or None
        if template_path is None:
            root = _assets_subdir(cfg, "filter")
            template_path = root / "judge_template.txt" if root else None
        template = xfilter.load_judge_template(template_path)
    except (ValueError, FileNotFoundError) as err:
        raise ConfigError("filter.assets", str(err)) from err
    backend = _make_backend(cfg, out_dir)
    in_path = _resolve_input(flt["input"], out_dir, [GENERATED], "genchat")
    originals: dict[str, dict[str, Any]] = {}
    dialogues = []
    rejects = 0
    for rec in _limited(read_jsonl(in_path, "genchat"), args):
        if validate_dialogue_record(rec) is not None:
            rejects += 1
            continue
        dialogue = record_to_dialogue(rec, counter)
        originals[dialogue.id] = rec
        dialogues.append(dialogue)
    result = xfilter.filter_dataset(
        dialogues,
        backend,
        lexicons=lexicons,
        judge_template=template,
        counter=counter,
        budget=flt["budget"],
        model=cfg["backend"]["model"],
        temperature=cfg["backend"]["temperatures"]["filter"],
        seed=cfg["run"]["seed"],
        parallelism=cfg["backend"]["parallelism"],
    )
    kept_count = write_jsonl(out_dir / KEPT, (originals[d.id] for d in result.kept))
    write_jsonl(
        out_dir / DROPPED,
        (
            {"dialogue": originals[d.id], "verdict": xfilter.verdict_to_record(v)}
            for d, v in result.dropped
        ),
    )
    print(f"[filter] {len(dialogues)} in, {kept_count} kept, "
          f"{len(result.dropped)} dropped -> {out_dir / KEPT}")
    return {
        "input_count": len(dialogues),
        "output_count": kept_count,
        "dropped": len(result.dropped),
        "rejects": rejects,
        "criterion_histogram": {str(k): v for k, v in sorted(result.criterion_counts.items())},
        "parse_failed": result.criterion_counts.get(xfilter.PARSE_FAILED_SENTINEL, 0),
        "failures": len(result.failures),
        **_cache_fields(backend),
    }


def stage_translate(cfg: dict[str, Any], args: argparse.Namespace, out_dir: Path) -> dict[str, Any]:
    counter = _make_counter(cfg)
    xl = cfg["translate"]
    try:
        principles = xlate.load_translate_principles(
            xl["target_langs"], assets_dir=_assets_subdir(cfg, "translate")
        )
    except ValueError as err:
        raise ConfigError("translate.assets", str(err)) from err
    backend = _make_backend(cfg, out_dir)
    in_path = _resolve_input(xl["input"], out_dir, [KEPT], "filter")
    dialogues = []
    rejects = 0
    for rec in _limited(read_jsonl(in_path, "filter"), args):
        if validate_dialogue_record(rec) is not None:
            rejects += 1
            continue
        dialogues.append(record_to_dialogue(rec, counter))
    translated, failures = xlate.run_translation(
        dialogues,
        xl["target_langs"],
        backend,
        principles=principles,
        counter=counter,
        model=cfg["backend"]["model"],
        temperature=cfg["backend"]["temperatures"]["translate"],
        seed=cfg["run"]["seed"],
        parallelism=cfg["backend"]["parallelism"],
    )
    records = [dialogue_to_record(d) for d in translated]
    out_count = write_jsonl(out_dir / TRANSLATED, records)
    per_lang: dict[str, int] = {}
    for record in records:
        per_lang[record["lang"]] = per_lang.get(record["lang"], 0) + 1
    flagged = sum(1 for record in records if record["flags"])
    print(f"[translate] {len(dialogues)} in, {out_count} out -> {out_dir / TRANSLATED}")
    return {
        "input_count": len(dialogues),
        "output_count": out_count,
        "per_language": per_lang,
        "rejects": rejects,
        "flagged": flagged,
        "failures": len(failures),
        **_cache_fields(backend),
    }


def stage_sample(cfg: dict[str, Any], args: argparse.Namespace, out_dir: Path) -> dict[str, Any]:
    sample = cfg["sample"]
    if sample["inputs"]:
        in_paths = []
        for raw in sample["inputs"]:
            path = Path(raw)
            if not path.is_file():
                raise MissingArtifact(path, "genchat/translate")
            in_paths.append(path)
    else:
        in_paths = [
            out_dir / name for name in (GENERATED, TRANSLATED) if (out_dir / name).is_file()
        ]
        if not in_paths:
            raise MissingArtifact(out_dir / GENERATED, "genchat")
    records: list[dict[str, Any]] = []
    for path in in_paths:
        records.extend(_limited(read_jsonl(path, "genchat"), args))
    available: dict[tuple[str, str], int] = {}
    ids_by_cell: dict[tuple[str, str], list[str]] = {}
    rejects = 0
    for rec in records:
        if validate_dialogue_record(rec) is not None:
            rejects += 1
            continue
        cell = (rec["lang"], rec["category"])
        available[cell] = available.get(cell, 0) + 1
        ids_by_cell.setdefault(cell, []).append(rec["id"])
    overrides = {}
    for key, value in sample["overrides"].items():
        lang, category = key.split("/", 1)
        overrides[(lang, category)] = value
    plan = budget_mod.plan_budget(available, overrides)
    seed = cfg["run"]["seed"]
    chosen: set[str] = set()
    cell_report = []
    for cell_key, ids in sorted(ids_by_cell.items()):
        cell = plan.cell(*cell_key)
        take = min(cell.target, cell.available)
        chosen.update(budget_mod.sample_subset(ids, take, seed))
        cell_report.append({
            "lang": cell.lang,
            "category": cell.category,
            "available": cell.available,
            "target": cell.target,
            "sampled": take,
            "shortfall": cell.shortfall,
        })
    out_count = write_jsonl(
        out_dir / SAMPLED,
        (rec for rec in records if rec.get("id") in chosen),
    )
    print(f"[sample] {len(records)} in, {out_count} sampled -> {out_dir / SAMPLED}")
    return {
        "input_count": len(records),
        "output_count": out_count,
        "rejects": rejects,
        "cells": cell_report,
    }


def stage_sweep(cfg: dict[str, Any], args: argparse.Namespace, out_dir: Path) -> dict[str, Any]:
    sweep = cfg["sweep"]
    if not sweep["cells"]:
        raise ConfigError("sweep.cells", "at least one {lang, category, mode} cell required")
    in_path = _resolve_input(sweep["input"], out_dir, [SAMPLED], "sample")
    ids_by_cell: dict[tuple[str, str], list[str]] = {}
    total = 0
    for rec in _limited(read_jsonl(in_path, "sample"), args):
        total += 1
        ids_by_cell.setdefault((rec.get("lang"), rec.get("category")), []).append(rec["id"])
    eval_points = None
    if sweep["eval_points"]:
        points_path = Path(sweep["eval_points"])
        if not points_path.is_file():
            raise ConfigError("sweep.eval_points", f"file not found: {points_path}")
        try:
            eval_points = budget_mod.load_eval_points(points_path)
        except ValueError as err:
            raise ConfigError("sweep.eval_points", str(err)) from err
    manifests = []
    for cell in sweep["cells"]:
        ids = ids_by_cell.get((cell["lang"], cell["category"]), [])
        if not ids:
            raise ConfigError(
                "sweep.cells",
                f"no records for (lang={cell['lang']}, category={cell['category']}) "
                f"in {in_path}",
            )
        manifest = budget_mod.build_sweep(
            ids,
            mode=cell["mode"],
            seed=cfg["run"]["seed"],
            lang=cell["lang"],
            category=cell["category"],
            ladder=sweep["ladder"],
        )
        cell_dir = out_dir / "sweep" / f"{cell['lang']}_{cell['category']}_{cell['mode']}"
        budget_mod.write_manifest(manifest, cell_dir)
        entry: dict[str, Any] = {
            "lang": cell["lang"],
            "category": cell["category"],
            "mode": cell["mode"],
            "ladder": list(manifest.ladder),
            "dir": str(cell_dir),
        }
        if eval_points is not None:
            rows, rejected = budget_mod.tabulate_eval(manifest, eval_points)
            (cell_dir / "eval_table.txt").write_text(
                budget_mod.render_eval_table(rows), encoding="utf-8"
            )
            entry["eval_rows"] = len(rows)
            entry["eval_rejected"] = [msg for _, msg in rejected]
        manifests.append(entry)
    print(f"[sweep] {total} records in, {len(manifests)} manifests -> {out_dir / 'sweep'}")
    return {"input_count": total, "output_count": len(manifests), "manifests": manifests}


def stage_stats(cfg: dict[str, Any], args: argparse.Namespace, out_dir: Path) -> dict[str, Any]:
    counter = _make_counter(cfg)
    st = cfg["stats"]
    in_path = _resolve_input(
        st["input"], out_dir, [SAMPLED, TRANSLATED, KEPT, GENERATED], "genchat"
    )
    records = list(_limited(read_jsonl(in_path, "genchat"), args))
    acc = stats_mod.StatsAccumulator(counter)
    for rec in records:
        acc.add(rec)
    overall = acc.finalize()
    by_lang = stats_mod.per_language_stats(records, counter)
    report = stats_mod.render_report(overall, st["format"])
    if by_lang:
        report += "\n" + stats_mod.render_report(by_lang, st["format"])
    (out_dir / "report.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    return {
        "input": str(in_path),
        "input_count": len(records),
        "output_count": overall.dialogues,
        "rejects": acc.rejects,
        "dialogues": overall.dialogues,
        "turns": overall.turns,
        "avg_question_tokens": round(overall.avg_question_tokens, 2),
        "avg_answer_tokens": round(overall.avg_answer_tokens, 2),
        "avg_turn_tokens": round(overall.avg_turn_tokens, 2),
        "counter_id": overall.counter_id,
    }


STAGE_FUNCS: dict[str, Callable[[dict[str, Any], argparse.Namespace, Path], dict[str, Any]]] = {
    "ingest": stage_ingest,
    "segment": stage_segment,
    "genchat": stage_genchat,
    "filter": stage_filter,
    "translate": stage_translate,
    "sample": stage_sample,
    "sweep": stage_sweep,
    "stats": stage_stats,
}


# --- entry point ---


def _parse_args(argv: list[str] | None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to the TOML run configuration")
    common.add_argument("--seed", type=int, default=None, help="override run.seed")
    common.add_argument("--backend", default=None,
                        help="override backend.kind (http, mock:echo, "
                             "mock:scripted=FILE, mock:template=FILE)")
    common.add_argument("--parallelism", type=int, default=None,
                        help="override backend.parallelism")
    common.add_argument("--lang", default=None,
                        help="restrict the run to one language")
    common.add_argument("--limit", type=int, default=None,
                        help="cap input records per stage for smoke runs")
    common.add_argument("--log", default=None, help="override the run-log path")
    parser = argparse.ArgumentParser(
        prog="multisft",
        description="Batch pipeline for multilingual SFT data construction.",
    )
    sub = parser.add_subparsers(dest="stage", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    return parser.parse_args(argv)


def _append_log(cfg: dict[str, Any], out_dir: Path, entry: dict[str, Any]) -> None:
    log_path = Path(cfg["run"]["log"]) if cfg["run"]["log"] else out_dir / "run.log.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, ensure_ascii=False, sort_keys=True))
        fh.write("\n")


def main(argv: list[str] | None = None) -> int:
    args = _parse_args(argv)
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    try:
        cfg = validate_config(load_raw_config(args.config), args)
    except ConfigError as err:
        print(f"config error at {err.path}: {err.message}", file=sys.stderr)
        return 2
    out_dir = Path(cfg["run"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.monotonic()
    try:
        fields = STAGE_FUNCS[args.stage](cfg, args, out_dir)
    except ConfigError as err:
        print(f"config error at {err.path}: {err.message}", file=sys.stderr)
        return 2
    except MissingArtifact as err:
        print(f"missing upstream artifact: {err}", file=sys.stderr)
        return 3
    except Exception:
        logger.exception("stage %s failed", args.stage)
        return 1
    entry = {
        "stage": args.stage,
        "config_digest": config_digest(cfg),
        "wall_time_s": round(time.monotonic() - started, 3),
        **fields,
    }
    _append_log(cfg, out_dir, entry)
    return 0


if __name__ == "__main__":
    sys.exit(main())
