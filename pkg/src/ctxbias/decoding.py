"""Greedy and beam-search decoding with bias-phrase boosting.

A hypothesis carries boost trackers, one per bias entry at most. When the
last decoder layer's context-attention picks entry n and the hypothesis
emits that entry's first token, a tracker starts; from then on exactly
the next expected token of the entry is boosted (mode "next") until the
entry completes or the hypothesis diverges from it. Mode "all" instead
boosts every token of the winning entry at the steps where it wins.

Boosting adds a constant to the chosen logits before the log-softmax.
Ranking, pruning, and the reported hypothesis score all use the boosted
log-probabilities; the unboosted sum is kept alongside for diagnostics.

Two interchangeable decode engines produce the per-step logits: a
reference engine that re-runs the full decoder on each prefix, and a
cached engine that computes each new position incrementally against
stored self-attention state (several times faster, equal within
floating-point noise). Engines may be prebuilt and reused across boost
values for the same audio and bias list; cached prefixes carry over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .biasing import BOS_ID, EOS_ID, detokenize
from .errors import ContractError
from .model import ContextEncoding, Model, decode_step, encode_audio

MODES = ("next", "all")


@dataclass(frozen=True)
class BoostTracker:
    entry: int  # 1-based bias-entry index (0 is the no-match dummy)
    tokens: tuple[int, ...]  # the entry's output-surface token ids
    position: int  # tokens already matched; 0 < position < len(tokens)

    @property
    def expected(self) -> int:
        return self.tokens[self.position]


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # BOS-led token prefix
    score: float  # cumulative boosted log-probability (ranking, reporting)
    log_prob: float  # cumulative unboosted log-probability (diagnostics)
    trackers: tuple[BoostTracker, ...] = ()
    finished: bool = False  # last token is EOS
    truncated: bool = False  # force-finished at the length cap

    def text(self) -> str:
        return detokenize(self.tokens)


def apply_boost(logits: np.ndarray, boosted: set[int], boost: float) -> np.ndarray:
    """Return a copy of the logits with `boost` added at the boosted ids."""
    out = np.array(logits, dtype=np.float64, copy=True)
    if boosted and boost != 0.0:
        out[list(boosted)] += boost
    return out


def tracker_update(
    trackers: tuple[BoostTracker, ...],
    winner: int,
    entry_tokens: Sequence[tuple[int, ...]],
    emitted: int,
) -> tuple[BoostTracker, ...]:
    """Advance trackers by one emitted token and start a new one when due.

    Existing trackers advance when the emitted token is the one they
    expect and are dropped otherwise; trackers that reach the end of
    their entry are dropped as complete. Then, if the step's winner n is
    a real entry with no surviving tracker and the emitted token equals
    that entry's first token, a tracker starts past its first token.
    Single-token entries complete immediately and never store a tracker.
    """
    updated = []
    for tr in trackers:
        if tr.expected == emitted and tr.position + 1 < len(tr.tokens):
            updated.append(replace(tr, position=tr.position + 1))
    if winner > 0 and all(tr.entry != winner for tr in updated):
        tokens = tuple(entry_tokens[winner - 1])
        if len(tokens) > 1 and emitted == tokens[0]:
            updated.append(BoostTracker(entry=winner, tokens=tokens, position=1))
    return tuple(updated)


def boosted_tokens(
    trackers: tuple[BoostTracker, ...],
    winner: int,
    entry_tokens: Sequence[tuple[int, ...]],
    mode: str,
) -> set[int]:
    """Token ids to boost at this step, before the token is chosen.

    Mode "next": each active tracker contributes its expected token, and
    a winning entry without a tracker contributes its first token (so
    the entry is boosted from the step its winner first fires). Mode
    "all": every token of the winning entry, only at winning steps.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "all":
        return set(entry_tokens[winner - 1]) if winner > 0 else set()
    out = {tr.expected for tr in trackers}
    if winner > 0 and all(tr.entry != winner for tr in trackers):
        tokens = entry_tokens[winner - 1]
        if tokens:
            out.add(tokens[0])
    return out


def _log_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


# -- decode engines -----------------------------------------------------------


class ReferenceEngine:
    """Per-step logits by re-running the full decoder on the prefix."""

    def __init__(self, model: Model, audio_tokens: Sequence[int],
                 ctx: ContextEncoding | None):
        self._model = model
        self._ctx = ctx
        with T.no_grad():
            self._memory = encode_audio(model, audio_tokens)

    def step(self, prefix: Sequence[int]) -> tuple[np.ndarray, int]:
        with T.no_grad():
            out = decode_step(self._model, self._memory, self._ctx, prefix)
        return out.logits, out.winners[-1]


def _layer_norm(x: np.ndarray, gain: np.ndarray, offset: np.ndarray) -> np.ndarray:
    mu = x.mean()
    centered = x - mu
    var = (centered * centered).mean()
    return centered / np.sqrt(var + 1e-5) * gain + offset


def _softmax_last(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class CachedEngine:
    """Per-step logits computed incrementally with per-prefix caches.

    Each processed prefix stores its per-layer self-attention keys and
    values, so extending a hypothesis costs one position instead of a
    full re-forward. Cross-attention keys/values over the audio memory
    and the bias list's score keys and value projections are precomputed
    once. States persist across searches on the same engine, so a boost
    sweep over one utterance reuses shared prefixes.
    """

    def __init__(self, model: Model, audio_tokens: Sequence[int],
                 ctx: ContextEncoding | None):
        self._model = model
        self._ctx = ctx
        cfg = model.config
        p = {name: t.data for name, t in model.params.items()}
        self._p = p
        self._n_heads = cfg.n_heads
        self._head_dim = cfg.d_model // cfg.n_heads
        with T.no_grad():
            memory = encode_audio(model, audio_tokens).data
        self._cross = []
        for i in range(cfg.decoder_layers):
            pre = f"dec.l{i}.cross"
            k = memory @ p[f"{pre}.wk"] + p[f"{pre}.bk"]
            v = memory @ p[f"{pre}.wv"] + p[f"{pre}.bv"]
            self._cross.append((
                k.reshape(-1, self._n_heads, self._head_dim).transpose(1, 2, 0),
                v.reshape(-1, self._n_heads, self._head_dim).transpose(1, 0, 2),
            ))
        if ctx is not None:
            summaries = ctx.summaries.data
            self._score_k = [summaries @ p[f"dec.l{i}.ctx.score_wk"]
                             for i in range(cfg.decoder_layers)]
            self._value_kv = [
                [(e.data @ p[f"dec.l{i}.ctx.wk"], e.data @ p[f"dec.l{i}.ctx.wv"])
                 for e in ctx.value_embeds]
                for i in range(cfg.decoder_layers)
            ]
        empty = np.zeros((0, cfg.d_model))
        self._states: dict[tuple[int, ...], list] = {
            (): [(empty, empty) for _ in range(cfg.decoder_layers)]
        }
        self._outputs: dict[tuple[int, ...], tuple[np.ndarray, int]] = {}

    def step(self, prefix: Sequence[int]) -> tuple[np.ndarray, int]:
        prefix = tuple(int(t) for t in prefix)
        if not prefix or prefix[0] != BOS_ID:
            raise ContractError("decoder prefix must start with BOS")
        if len(prefix) > self._model.config.max_text_len:
            raise ContractError(
                f"text length {len(prefix)} exceeds max {self._model.config.max_text_len}")
        cached = self._outputs.get(prefix)
        if cached is not None:
            return cached
        start = len(prefix) - 1
        while prefix[:start] not in self._states:
            start -= 1
        result = None
        for j in range(start, len(prefix)):
            result = self._advance(prefix[:j], prefix[j])
        return result

    def _advance(self, parent: tuple[int, ...], token: int) -> tuple[np.ndarray, int]:
        cfg = self._model.config
        p = self._p
        d = cfg.d_model
        heads, head_dim = self._n_heads, self._head_dim
        parent_state = self._states[parent]
        position = len(parent)
        x = p["text_embed"][token] * math.sqrt(d) + self._model.pos[position]
        new_state = []
        winner = 0
        for i in range(cfg.decoder_layers):
            pre = f"dec.l{i}"
            keys, values = parent_state[i]
            keys = np.concatenate(
                [keys, (x @ p[f"{pre}.self.wk"] + p[f"{pre}.self.bk"])[None]])
            values = np.concatenate(
                [values, (x @ p[f"{pre}.self.wv"] + p[f"{pre}.self.bv"])[None]])
            new_state.append((keys, values))
            q = (x @ p[f"{pre}.self.wq"] + p[f"{pre}.self.bq"]).reshape(heads, 1, head_dim)
            kh = keys.reshape(-1, heads, head_dim).transpose(1, 2, 0)
            vh = values.reshape(-1, heads, head_dim).transpose(1, 0, 2)
            attn = _softmax_last(q @ kh / math.sqrt(head_dim)) @ vh
            x = _layer_norm(
                x + (attn.reshape(d) @ p[f"{pre}.self.wo"] + p[f"{pre}.self.bo"]),
                p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            q = (x @ p[f"{pre}.cross.wq"] + p[f"{pre}.cross.bq"]).reshape(heads, 1, head_dim)
            kh, vh = self._cross[i]
            attn = _softmax_last(q @ kh / math.sqrt(head_dim)) @ vh
            x = _layer_norm(
                x + (attn.reshape(d) @ p[f"{pre}.cross.wo"] + p[f"{pre}.cross.bo"]),
                p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            if self._ctx is not None:
                scores = (x @ p[f"{pre}.ctx.score_wq"]) @ self._score_k[i].T / math.sqrt(d)
                winner = int(np.argmax(scores))
                if winner > 0:
                    value_k, value_v = self._value_kv[i][winner - 1]
                    weights = _softmax_last((x @ p[f"{pre}.ctx.wq"]) @ value_k.T / math.sqrt(d))
                    x = x + weights @ value_v
            hidden = np.maximum(x @ p[f"{pre}.ffw.w1"] + p[f"{pre}.ffw.b1"], 0.0)
            x = _layer_norm(x + (hidden @ p[f"{pre}.ffw.w2"] + p[f"{pre}.ffw.b2"]),
                            p[f"{pre}.ln3.g"], p[f"{pre}.ln3.b"])
        logits = x @ p["out.w"] + p["out.b"]
        child = parent + (token,)
        self._states[child] = new_state
        self._outputs[child] = (logits, winner)
        return logits, winner


def _resolve_engine(engine, model, audio_tokens, ctx):
    if not isinstance(engine, str):
        return engine
    if engine == "fast":
        return CachedEngine(model, audio_tokens, ctx)
    if engine == "reference":
        return ReferenceEngine(model, audio_tokens, ctx)
    raise ValueError(f"engine must be 'fast', 'reference', or an engine object, got {engine!r}")


# -- search -------------------------------------------------------------------


def beam_search(
    model: Model,
    audio_tokens: Sequence[int],
    ctx: ContextEncoding | None,
    beam_size: int = 4,
    boost: float = 0.0,
    mode: str = "next",
    max_len: int | None = None,
    engine="fast",
) -> tuple[Hypothesis, list[Hypothesis]]:
    """Boosted beam search; returns the best hypothesis and the full beam.

    Per step and per hypothesis: get next-token logits and the last
    decoder layer's winner, boost this hypothesis's tracked token ids,
    then rank all continuations by cumulative boosted log-probability.
    Exact ties break by token id, then by parent beam position. A
    hypothesis finishes when it emits EOS; one that reaches max_len
    generated tokens is force-finished with EOS and marked truncated.
    """
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    if boost < 0:
        raise ValueError(f"boost must be >= 0, got {boost}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    limit = model.config.max_text_len - 1
    if max_len is None:
        max_len = limit
    if not 1 <= max_len <= limit:
        raise ValueError(f"max_len must be in [1, {limit}], got {max_len}")

    eng = _resolve_engine(engine, model, audio_tokens, ctx)
    entry_tokens = ctx.output_tokens if ctx is not None else ()
    beam = [Hypothesis(tokens=(BOS_ID,), score=0.0, log_prob=0.0)]

    for _ in range(max_len):
        if all(h.finished for h in beam):
            break
        candidates = []
        for parent_idx, hyp in enumerate(beam):
            if hyp.finished:
                # carried forward unchanged; sorts ahead of same-score children
                candidates.append((-hyp.score, -1, parent_idx, hyp))
                continue
            logits, winner = eng.step(hyp.tokens)
            boost_set = boosted_tokens(hyp.trackers, winner, entry_tokens, mode)
            boosted_lp = _log_probs(apply_boost(logits, boost_set, boost))
            plain_lp = _log_probs(logits)
            top = np.argsort(-boosted_lp, kind="stable")[:beam_size]
            for token in (int(t) for t in top):
                child = Hypothesis(
                    tokens=hyp.tokens + (token,),
                    score=hyp.score + float(boosted_lp[token]),
                    log_prob=hyp.log_prob + float(plain_lp[token]),
                    trackers=tracker_update(hyp.trackers, winner, entry_tokens, token),
                    finished=token == EOS_ID,
                )
                candidates.append((-child.score, token, parent_idx, child))
        candidates.sort(key=lambda c: c[:3])
        beam = [c[3] for c in candidates[:beam_size]]

    final = []
    for hyp in beam:
        if hyp.finished:
            final.append(hyp)
            continue
        logits, winner = eng.step(hyp.tokens)
        boost_set = boosted_tokens(hyp.trackers, winner, entry_tokens, mode)
        boosted_lp = _log_probs(apply_boost(logits, boost_set, boost))
        plain_lp = _log_probs(logits)
        final.append(Hypothesis(
            tokens=hyp.tokens + (EOS_ID,),
            score=hyp.score + float(boosted_lp[EOS_ID]),
            log_prob=hyp.log_prob + float(plain_lp[EOS_ID]),
            trackers=(),
            finished=True,
            truncated=True,
        ))
    final.sort(key=lambda h: (-h.score, h.tokens))
    return final[0], final


def greedy_decode(
    model: Model,
    audio_tokens: Sequence[int],
    ctx: ContextEncoding | None,
    boost: float = 0.0,
    mode: str = "next",
    max_len: int | None = None,
    engine="fast",
) -> Hypothesis:
    """Beam search with beam size 1."""
    best, _ = beam_search(model, audio_tokens, ctx, beam_size=1, boost=boost,
                          mode=mode, max_len=max_len, engine=engine)
    return best
