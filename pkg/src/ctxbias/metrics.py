"""Word-level scoring of recognition output.

Provides minimum-edit alignment between reference and hypothesis word
sequences, micro-averaged word error rate, an error split between words
that appear in a bias vocabulary and words that do not, per-occurrence
F1 over bias-vocabulary words, and helpers that extract and apply
text-level replacement pairs from systematic misrecognitions.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import MetricError

MATCH = "match"
SUBSTITUTE = "substitute"
DELETE = "delete"
INSERT = "insert"

# Hyp-side word limit for a detect span built around one substitution.
MAX_DETECT_WORDS = 3


@dataclass(frozen=True)
class AlignOp:
    kind: str  # MATCH, SUBSTITUTE, DELETE, or INSERT
    ref: str | None  # reference word; None for insertions
    hyp: str | None  # hypothesis word; None for deletions


Alignment = list[AlignOp]


def align(ref_words: Sequence[str], hyp_words: Sequence[str]) -> Alignment:
    """Minimum-cost word alignment with unit substitution/deletion/insertion
    costs. Equal-cost choices resolve match > substitute > delete > insert,
    applied at each step of the traceback from the end of both sequences.
    """
    ref = list(ref_words)
    hyp = list(hyp_words)
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = cost[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
            cost[i, j] = min(diag, cost[i - 1, j] + 1, cost[i, j - 1] + 1)

    ops: Alignment = []
    i, j = n, m
    while i > 0 or j > 0:
        if (
            i > 0
            and j > 0
            and ref[i - 1] == hyp[j - 1]
            and cost[i, j] == cost[i - 1, j - 1]
        ):
            ops.append(AlignOp(MATCH, ref[i - 1], hyp[j - 1]))
            i -= 1
            j -= 1
        elif i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + 1:
            ops.append(AlignOp(SUBSTITUTE, ref[i - 1], hyp[j - 1]))
            i -= 1
            j -= 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            ops.append(AlignOp(DELETE, ref[i - 1], None))
            i -= 1
        else:
            ops.append(AlignOp(INSERT, None, hyp[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def alignment_errors(alignment: Alignment) -> int:
    return sum(1 for op in alignment if op.kind != MATCH)


def alignment_ref_len(alignment: Alignment) -> int:
    return sum(1 for op in alignment if op.kind != INSERT)


def wer(alignments: Iterable[Alignment]) -> float:
    """Micro-averaged word error rate: total edit errors over total
    reference words. Raises MetricError when there are no reference words.
    """
    errors = 0
    refs = 0
    for alignment in alignments:
        errors += alignment_errors(alignment)
        refs += alignment_ref_len(alignment)
    if refs == 0:
        raise MetricError("word error rate is undefined without reference words")
    return errors / refs


@dataclass(frozen=True)
class ErrorBreakdown:
    """Error and reference-word counts split by bias-vocabulary membership.

    Substitutions and deletions are attributed by the reference word;
    insertions are attributed by the hypothesis word.
    """

    biased_ref: int = 0  # reference words in the bias vocabulary
    unbiased_ref: int = 0  # reference words outside it
    biased_sub: int = 0
    biased_del: int = 0
    biased_ins: int = 0
    unbiased_sub: int = 0
    unbiased_del: int = 0
    unbiased_ins: int = 0

    @property
    def biased_errors(self) -> int:
        return self.biased_sub + self.biased_del + self.biased_ins

    @property
    def unbiased_errors(self) -> int:
        return self.unbiased_sub + self.unbiased_del + self.unbiased_ins

    @property
    def errors(self) -> int:
        return self.biased_errors + self.unbiased_errors

    @property
    def ref_words(self) -> int:
        return self.biased_ref + self.unbiased_ref

    def __add__(self, other: "ErrorBreakdown") -> "ErrorBreakdown":
        return ErrorBreakdown(
            self.biased_ref + other.biased_ref,
            self.unbiased_ref + other.unbiased_ref,
            self.biased_sub + other.biased_sub,
            self.biased_del + other.biased_del,
            self.biased_ins + other.biased_ins,
            self.unbiased_sub + other.unbiased_sub,
            self.unbiased_del + other.unbiased_del,
            self.unbiased_ins + other.unbiased_ins,
        )


def categorize(alignment: Alignment, bias_vocab: set[str]) -> ErrorBreakdown:
    """Split one alignment's reference words and errors by whether the
    attributed word belongs to the bias vocabulary.
    """
    counts = dict.fromkeys(ErrorBreakdown.__dataclass_fields__, 0)
    for op in alignment:
        if op.kind != INSERT:
            side = "biased" if op.ref in bias_vocab else "unbiased"
            counts[f"{side}_ref"] += 1
            if op.kind == SUBSTITUTE:
                counts[f"{side}_sub"] += 1
            elif op.kind == DELETE:
                counts[f"{side}_del"] += 1
        else:
            side = "biased" if op.hyp in bias_vocab else "unbiased"
            counts[f"{side}_ins"] += 1
    return ErrorBreakdown(**counts)


def f1_counts(alignment: Alignment, bias_vocab: set[str]) -> tuple[int, int, int]:
    """Per-occurrence counts over bias-vocabulary words: a reference
    occurrence is a true positive when aligned to the identical hypothesis
    word and a false negative otherwise; a hypothesis word equal to a
    vocabulary surface that is not a true positive is a false positive.
    Returns (tp, fp, fn).
    """
    tp = fp = fn = 0
    for op in alignment:
        if op.kind == MATCH:
            if op.ref in bias_vocab:
                tp += 1
        elif op.kind == SUBSTITUTE:
            if op.ref in bias_vocab:
                fn += 1
            if op.hyp in bias_vocab:
                fp += 1
        elif op.kind == DELETE:
            if op.ref in bias_vocab:
                fn += 1
        else:
            if op.hyp in bias_vocab:
                fp += 1
    return tp, fp, fn


def f1_score(tp: int, fp: int, fn: int) -> float:
    """2PR / (P + R), defined as 0.0 when no positives exist on either side."""
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return 2 * tp / denom


def _vocabs_for(n: int, bias_vocab) -> list[set[str]]:
    if isinstance(bias_vocab, (set, frozenset)):
        return [set(bias_vocab)] * n
    vocabs = [set(v) for v in bias_vocab]
    if len(vocabs) != n:
        raise MetricError(
            f"got {n} alignments but {len(vocabs)} bias vocabularies"
        )
    return vocabs


def f1(alignments: Sequence[Alignment], bias_vocab) -> float:
    """Corpus-level F1 over bias-vocabulary occurrences. bias_vocab is
    either one shared set or a per-alignment sequence of sets.
    """
    alignments = list(alignments)
    vocabs = _vocabs_for(len(alignments), bias_vocab)
    tp = fp = fn = 0
    for alignment, vocab in zip(alignments, vocabs):
        t, p, n = f1_counts(alignment, vocab)
        tp += t
        fp += p
        fn += n
    return f1_score(tp, fp, fn)


@dataclass(frozen=True)
class CellMetrics:
    """Aggregated scores for one evaluated set of utterances."""

    wer: float
    bwer: float | None  # None when no reference word is in any bias vocabulary
    uwer: float | None  # None when every reference word is in the vocabulary
    f1: float
    breakdown: ErrorBreakdown
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        d = {
            "wer": self.wer,
            "bwer": self.bwer,
            "uwer": self.uwer,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }
        for name in ErrorBreakdown.__dataclass_fields__:
            d[name] = getattr(self.breakdown, name)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CellMetrics":
        breakdown = ErrorBreakdown(
            **{name: int(d[name]) for name in ErrorBreakdown.__dataclass_fields__})
        return cls(wer=d["wer"], bwer=d["bwer"], uwer=d["uwer"], f1=d["f1"],
                   breakdown=breakdown, tp=int(d["tp"]), fp=int(d["fp"]),
                   fn=int(d["fn"]))


def evaluate(alignments: Sequence[Alignment], bias_vocab) -> CellMetrics:
    """Aggregate alignments into WER, the biased/unbiased split, and F1.

    bias_vocab is one shared set or a per-alignment sequence of sets.
    The biased and unbiased error counts always partition the total, and
    the two reference counts always partition the reference length.
    """
    alignments = list(alignments)
    vocabs = _vocabs_for(len(alignments), bias_vocab)
    total = ErrorBreakdown()
    tp = fp = fn = 0
    for alignment, vocab in zip(alignments, vocabs):
        total = total + categorize(alignment, vocab)
        t, p, n = f1_counts(alignment, vocab)
        tp += t
        fp += p
        fn += n
    if total.ref_words == 0:
        raise MetricError("word error rate is undefined without reference words")
    bwer = total.biased_errors / total.biased_ref if total.biased_ref else None
    uwer = total.unbiased_errors / total.unbiased_ref if total.unbiased_ref else None
    return CellMetrics(
        wer=total.errors / total.ref_words,
        bwer=bwer,
        uwer=uwer,
        f1=f1_score(tp, fp, fn),
        breakdown=total,
        tp=tp,
        fp=fp,
        fn=fn,
    )


def extract_substitutions(
    alignment: Alignment, new_words: Iterable[str]
) -> list[tuple[str, str]]:
    """Collect (detect span, target word) pairs for target words that were
    misrecognized as substitutions.

    The detect span is the hypothesis side of the contiguous run of
    substitute and insert steps containing the target's substitution,
    bounded by matches, deletions, substitutions of other target words,
    and spans already claimed. It is capped at MAX_DETECT_WORDS hypothesis
    words, keeping the target's own word and preferring words to its
    right, then to its left. Matched and deleted targets yield nothing.
    """
    targets = set(new_words)
    pairs: list[tuple[str, str]] = []
    claimed: set[int] = set()

    def in_run(k: int) -> bool:
        op = alignment[k]
        if k in claimed or op.kind not in (SUBSTITUTE, INSERT):
            return False
        return not (op.kind == SUBSTITUTE and op.ref in targets)

    for idx, op in enumerate(alignment):
        if op.kind != SUBSTITUTE or op.ref not in targets or idx in claimed:
            continue
        lo = idx
        while lo - 1 >= 0 and in_run(lo - 1):
            lo -= 1
        hi = idx
        while hi + 1 < len(alignment) and in_run(hi + 1):
            hi += 1
        chosen = [idx]
        right = idx + 1
        while right <= hi and len(chosen) < MAX_DETECT_WORDS:
            chosen.append(right)
            right += 1
        left = idx - 1
        while left >= lo and len(chosen) < MAX_DETECT_WORDS:
            chosen.append(left)
            left -= 1
        chosen.sort()
        detect = " ".join(alignment[k].hyp for k in chosen)
        pairs.append((detect, op.ref))
        claimed.update(chosen)
    return pairs


def apply_text_replacements(text: str, pairs: Iterable[tuple[str, str]]) -> str:
    """Rewrite whole-word detect spans to their target surfaces.

    Pairs apply longest detect span first (ties by detect then target
    text), scanning left to right. Words produced by a replacement are
    never rewritten again, so the whole operation is a single pass over
    the original text.
    """
    words = text.split()
    locked = [False] * len(words)
    ordered = sorted(pairs, key=lambda p: (-len(p[0].split()), p[0], p[1]))
    for detect, output in ordered:
        span = detect.split()
        out_words = output.split()
        k = len(span)
        i = 0
        while i + k <= len(words):
            if words[i : i + k] == span and not any(locked[i : i + k]):
                words[i : i + k] = out_words
                locked[i : i + k] = [True] * len(out_words)
                i += len(out_words)
            else:
                i += 1
    return " ".join(words)
