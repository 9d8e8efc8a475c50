"""Data-volume pruning: budget plans, nested subset ladders, sweep manifests."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

NON_EN_DEFAULTS = {"math": 32_000, "code": 16_000}
DEFAULT_LADDER = (2_000, 4_000, 8_000, 16_000, 32_000, 64_000, 128_000)
MODES = ("from_base", "from_en_sft")
INIT_INSTRUCTIONS = {
    "from_en_sft": "start from the English-SFT checkpoint",
    "from_base": "start from the base checkpoint",
}


@dataclass(frozen=True)
class BudgetCell:
    lang: str
    category: str
    available: int
    target: int

    @property
    def shortfall(self) -> int:
        return max(0, self.target - self.available)

    @property
    def feasible(self) -> bool:
        return self.shortfall == 0


@dataclass(frozen=True)
class BudgetPlan:
    cells: dict[tuple[str, str], BudgetCell]

    def cell(self, lang: str, category: str) -> BudgetCell:
        return self.cells[(lang, category)]

    def infeasible(self) -> list[BudgetCell]:
        return [c for c in self.cells.values() if not c.feasible]


@dataclass(frozen=True)
class SweepManifest:
    lang: str
    category: str
    ladder: tuple[int, ...]
    mode: str
    global_seed: int
    subsets: dict[int, tuple[str, ...]]


@dataclass(frozen=True)
class EvalPoint:
    budget: int
    mode: str
    score: float


def plan_budget(
    available: Mapping[tuple[str, str], int],
    overrides: Mapping[tuple[str, str], int] | None = None,
) -> BudgetPlan:
    """Apply the pruning defaults (non-English math 32K, code 16K) then overrides."""
    overrides = overrides or {}
    for key, count in available.items():
        if count < 0:
            raise ValueError(f"negative available count for {key}: {count}")
    for key, count in overrides.items():
        if count < 0:
            raise ValueError(f"negative budget override for {key}: {count}")
    cells: dict[tuple[str, str], BudgetCell] = {}
    for (lang, category), count in available.items():
        if (lang, category) in overrides:
            target = overrides[(lang, category)]
        elif lang != "en" and category in NON_EN_DEFAULTS:
            target = NON_EN_DEFAULTS[category]
        else:
            target = count
        cells[(lang, category)] = BudgetCell(lang, category, count, target)
    for cell in cells.values():
        if not cell.feasible:
            logger.warning(
                "budget cell (%s, %s) infeasible: target %d, available %d, short %d",
                cell.lang, cell.category, cell.target, cell.available, cell.shortfall,
            )
    return BudgetPlan(cells)


def _perm_key(seed: int, record_id: str) -> str:
    return hashlib.sha256(f"{seed}\x00{record_id}".encode("utf-8")).hexdigest()


def sample_subset(ids: Sequence[str], count: int, seed: int) -> list[str]:
    """First `count` ids of a seed-keyed pseudo-random permutation; nested across counts."""
    if count > len(ids):
        raise ValueError(
            f"requested {count} ids but only {len(ids)} available (short {count - len(ids)})"
        )
    order = sorted(ids, key=lambda r: (_perm_key(seed, r), r))
    return order[:count]


def build_sweep(
    record_ids: Sequence[str],
    mode: str,
    seed: int,
    lang: str,
    category: str,
    ladder: Sequence[int] = DEFAULT_LADDER,
) -> SweepManifest:
    if not record_ids:
        raise ValueError("cannot build a sweep over zero records")
    if mode not in MODES:
        raise ValueError(f"unknown sweep mode {mode!r}, expected one of {MODES}")
    ladder = tuple(ladder)
    if not ladder or any(b <= 0 for b in ladder) or list(ladder) != sorted(set(ladder)):
        raise ValueError(f"ladder must be ascending positive integers, got {ladder}")
    emitted = tuple(b for b in ladder if b <= len(record_ids))
    if emitted != ladder:
        dropped = [b for b in ladder if b > len(record_ids)]
        logger.warning(
            "ladder truncated: %d records cannot fill rungs %s", len(record_ids), dropped
        )
    if emitted:
        permutation = sample_subset(record_ids, emitted[-1], seed)
    else:
        permutation = []
    subsets = {b: tuple(permutation[:b]) for b in emitted}
    return SweepManifest(
        lang=lang, category=category, ladder=emitted, mode=mode,
        global_seed=seed, subsets=subsets,
    )


def _subset_filename(budget: int) -> str:
    return f"subset_{budget:07d}.txt"


def write_manifest(manifest: SweepManifest, out_dir: str | Path) -> list[Path]:
    """Header file plus one id-list file per rung; byte-deterministic."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        "# sweep manifest",
        f"lang: {manifest.lang}",
        f"category: {manifest.category}",
        f"mode: {manifest.mode}",
        f"initialization: {INIT_INSTRUCTIONS[manifest.mode]}",
        f"seed: {manifest.global_seed}",
        "ladder: " + " ".join(str(b) for b in manifest.ladder),
        "rungs:",
    ]
    for budget in manifest.ladder:
        lines.append(f"  {budget} -> {_subset_filename(budget)} ({len(manifest.subsets[budget])} ids)")
    header = out / "manifest.txt"
    header.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths = [header]
    for budget in manifest.ladder:
        path = out / _subset_filename(budget)
        path.write_text("\n".join(manifest.subsets[budget]) + "\n", encoding="utf-8")
        paths.append(path)
    return paths


def load_eval_points(path: str | Path) -> list[EvalPoint]:
    """Parse budget/mode/score rows from a whitespace-delimited text file."""
    points = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ValueError(f"{path} line {lineno}: expected 'budget mode score', got {line!r}")
        budget_s, mode, score_s = fields
        if mode not in MODES:
            raise ValueError(f"{path} line {lineno}: unknown mode {mode!r}")
        try:
            points.append(EvalPoint(int(budget_s), mode, float(score_s)))
        except ValueError as err:
            raise ValueError(f"{path} line {lineno}: {err}") from err
    return points


def tabulate_eval(
    manifest: SweepManifest, points: Iterable[EvalPoint]
) -> tuple[list[tuple[int, str, float]], list[tuple[EvalPoint, str]]]:
    """Merge externally supplied scores into a budget-sorted table."""
    rows: list[tuple[int, str, float]] = []
    rejected: list[tuple[EvalPoint, str]] = []
    for point in points:
        if point.budget not in manifest.ladder:
            rejected.append(
                (point, f"budget {point.budget} not in ladder {list(manifest.ladder)}")
            )
            continue
        rows.append((point.budget, point.mode, point.score))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows, rejected


def render_eval_table(rows: Sequence[tuple[int, str, float]]) -> str:
    out = ["budget\tmode\tscore"]
    for budget, mode, score in rows:
        out.append(f"{budget}\t{mode}\t{score:.1f}")
    return "\n".join(out) + "\n"
