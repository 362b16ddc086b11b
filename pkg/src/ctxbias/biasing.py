"""Bias-list construction: entries, tokenization, and distractor sampling.

Entries carry an output surface (what the recognizer should emit) and a
detect surface (what it tends to emit instead); the two differ only for
replacement entries. Tokenization is character-level over a small fixed
vocabulary, so every normalized word is representable and word matching
in the metrics is exact string equality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .rng import Rng

# Token id layout. Specials first, then the printable characters.
PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
_CHARS = " '-abcdefghijklmnopqrstuvwxyz"
_CHAR_TO_ID = {c: i + 4 for i, c in enumerate(_CHARS)}
_ID_TO_CHAR = {i + 4: c for i, c in enumerate(_CHARS)}
TEXT_VOCAB_SIZE = 4 + len(_CHARS)  # 33

ENTRY_SOURCES = ("gold", "distractor", "replacement", "oracle-replacement")


def normalize(text: str) -> str:
    """Lowercase and collapse runs of whitespace to single spaces."""
    return " ".join(text.lower().split())


def tokenize(text: str) -> list[int]:
    """Character ids for normalized text; out-of-vocabulary chars become UNK.

    No BOS/EOS/PAD are added here; sequence framing is the model's job.
    """
    return [_CHAR_TO_ID.get(c, UNK_ID) for c in normalize(text)]


def detokenize(ids: Sequence[int]) -> str:
    """Inverse of tokenize for in-vocabulary text; specials are dropped."""
    return "".join(_ID_TO_CHAR.get(i, "?") for i in ids
                   if i not in (PAD_ID, BOS_ID, EOS_ID))


@dataclass(frozen=True)
class BiasEntry:
    output: str  # surface the recognizer should produce
    detect: str  # surface used for detection; equals output except for replacements
    source: str  # gold | distractor | replacement | oracle-replacement

    def key(self) -> tuple[str, str]:
        return (self.detect, self.output)

    def is_replacement(self) -> bool:
        return self.detect != self.output


def make_entry(output: str, detect: str | None = None, source: str | None = None) -> BiasEntry:
    """Build a normalized entry; detect defaults to the output surface."""
    out = normalize(output)
    if not out:
        raise ValueError("bias entry needs a non-empty output surface")
    det = normalize(detect) if detect is not None else out
    if not det:
        det = out
    if source is None:
        source = "replacement" if det != out else "gold"
    if source not in ENTRY_SOURCES:
        raise ValueError(f"unknown entry source {source!r}")
    if det != out and source not in ("replacement", "oracle-replacement"):
        raise ValueError("detect surface may differ from output only for replacement entries")
    return BiasEntry(output=out, detect=det, source=source)


@dataclass(frozen=True)
class ContextBiasingList:
    entries: tuple[BiasEntry, ...]  # ordered, deduplicated

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[BiasEntry]:
        return iter(self.entries)

    def __getitem__(self, i: int) -> BiasEntry:
        return self.entries[i]


def build_list(entries: Iterable[BiasEntry]) -> ContextBiasingList:
    """Deduplicate on (detect, output) keeping first occurrence order."""
    seen: set[tuple[str, str]] = set()
    kept: list[BiasEntry] = []
    for e in entries:
        if e.key() in seen:
            continue
        seen.add(e.key())
        kept.append(e)
    return ContextBiasingList(entries=tuple(kept))


def sample_distractors(pool: Sequence[BiasEntry], k: int,
                       exclude: Iterable[BiasEntry], rng: Rng) -> list[BiasEntry]:
    """Pick k distinct pool entries whose output surface is not excluded.

    Fewer than k candidates means all of them are returned. The draw is a
    pure function of (pool order, k, exclude, rng state).
    """
    banned = {e.output for e in exclude}
    seen: set[tuple[str, str]] = set()
    candidates: list[BiasEntry] = []
    for e in pool:
        if e.output in banned or e.key() in seen:
            continue
        seen.add(e.key())
        candidates.append(e)
    if k >= len(candidates):
        return candidates
    return rng.sample(candidates, k)


def save_list(path: str | Path, entries: Iterable[BiasEntry]) -> None:
    """Write entries as JSON Lines: {"output", "detect", "source"}."""
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            detect = None if e.detect == e.output else e.detect
            f.write(json.dumps({"output": e.output, "detect": detect, "source": e.source}) + "\n")


def load_list(path: str | Path) -> ContextBiasingList:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            entries.append(make_entry(obj["output"], obj.get("detect"), obj.get("source")))
    return build_list(entries)
