"""Token counting: a deterministic reference counter plus a loadable subword counter."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

# Ideograph / kana / hangul blocks counted one token per codepoint.
_CJK_RANGES: tuple[tuple[int, int], ...] = (
    (0x3040, 0x30FF),    # hiragana + katakana
    (0x31F0, 0x31FF),    # katakana phonetic extensions
    (0x3400, 0x4DBF),    # CJK extension A
    (0x4E00, 0x9FFF),    # CJK unified ideographs
    (0xAC00, 0xD7A3),    # hangul syllables
    (0xF900, 0xFAFF),    # CJK compatibility ideographs
    (0x20000, 0x2EBEF),  # CJK extensions B..F
    (0x30000, 0x3134F),  # CJK extension G
)

_NO_RANK = float("inf")


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    for lo, hi in _CJK_RANGES:
        if lo <= cp <= hi:
            return True
    return False


@dataclass(frozen=True)
class TokenCounter:
    """Pure token counter; immutable, safe to share across workers."""

    kind: str  # "reference" or "subword"
    vocab_id: str | None = None
    merge_ranks: dict[tuple[bytes, bytes], int] | None = field(default=None, repr=False)

    @property
    def counter_id(self) -> str:
        if self.kind == "reference":
            return "reference"
        return f"subword:{self.vocab_id}"

    def count(self, text: str) -> int:
        if self.kind == "reference":
            return _count_reference(text)
        assert self.merge_ranks is not None
        total = 0
        for chunk in text.split():
            total += _count_bpe_chunk(chunk, self.merge_ranks)
        return total


def _count_reference(text: str) -> int:
    count = 0
    in_run = False  # inside a letter/digit run
    for ch in text:
        if ch.isspace():
            in_run = False
        elif _is_cjk(ch):
            in_run = False
            count += 1
        elif ch.isalnum():
            if not in_run:
                count += 1
                in_run = True
        else:
            in_run = False
            count += 1
    return count


def _count_bpe_chunk(chunk: str, ranks: dict[tuple[bytes, bytes], int]) -> int:
    parts = [bytes([b]) for b in chunk.encode("utf-8")]
    while len(parts) >= 2:
        pairs = {(parts[i], parts[i + 1]) for i in range(len(parts) - 1)}
        best = min(pairs, key=lambda p: ranks.get(p, _NO_RANK))
        if best not in ranks:
            break
        merged: list[bytes] = []
        i = 0
        while i < len(parts):
            if i + 1 < len(parts) and (parts[i], parts[i + 1]) == best:
                merged.append(parts[i] + parts[i + 1])
                i += 2
            else:
                merged.append(parts[i])
                i += 1
        parts = merged
    return len(parts)


def reference_counter() -> TokenCounter:
    return TokenCounter(kind="reference")


def load_subword_counter(vocab_path: str | Path) -> TokenCounter:
    """Load a rank-ordered byte-pair merge table (one space-separated pair per line)."""
    path = Path(vocab_path)
    data = path.read_bytes()
    ranks: dict[tuple[bytes, bytes], int] = {}
    for lineno, line in enumerate(data.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split(" ")
        if len(fields) != 2 or not fields[0] or not fields[1]:
            raise ValueError(f"{path}: malformed merge line {lineno}: {line!r}")
        pair = (fields[0].encode("utf-8"), fields[1].encode("utf-8"))
        if pair not in ranks:
            ranks[pair] = len(ranks)
    vocab_id = f"{path.stem}-{hashlib.sha256(data).hexdigest()[:8]}"
    return TokenCounter(kind="subword", vocab_id=vocab_id, merge_ranks=ranks)


def count_tokens(counter: TokenCounter, text: str) -> int:
    return counter.count(text)
