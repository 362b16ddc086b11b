"""Experiment orchestration: the approach grid over boost values and
distractor counts, two-pass replacement construction, report rendering,
and the interactive correction session.

The seven approaches:

  no_biasing                        empty list, one cell
  biasing                           gold words + distractors, boost next expected token
  biasing_boost_all                 same lists, boost every list token of the winner
  biasing_text_replacement          rewrite the boost-0 biasing hypotheses with
                                    pairs mined from other utterances
  biasing_replacement               decode with replacement entries mined from
                                    other utterances
  biasing_text_replacement_oracle   rewrite with pairs mined from the same utterance
  biasing_replacement_oracle        decode with same-utterance replacement entries

Text approaches never re-decode: they are string functions of the boost-0
biasing hypotheses at the matching distractor count, so they carry no
boost dimension. Replacement pairs are mined once, from a first pass =
biasing at boost 0 with gold-only lists.

Distractor sets are fixed per (seed, utterance, count) so cells are
paired across approaches and boosts; pools are the other utterances'
new words. Metric classification always uses the utterance's own new
words, so the no_biasing row is constant and columns stay comparable.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .biasing import (
    BiasEntry,
    ContextBiasingList,
    build_list,
    make_entry,
    normalize,
    sample_distractors,
)
from .decoding import MODES, CachedEngine, beam_search
from .errors import ConfigError, ContractError
from .metrics import (
    CellMetrics,
    align,
    apply_text_replacements,
    evaluate,
    extract_substitutions,
)
from .model import Model, encode_context
from .rng import Rng, derive_seed
from .synthdata import Utterance, load_corpus
from .training import load_checkpoint, model_from_checkpoint

log = logging.getLogger(__name__)

APPROACHES = (
    "no_biasing",
    "biasing",
    "biasing_boost_all",
    "biasing_text_replacement",
    "biasing_replacement",
    "biasing_text_replacement_oracle",
    "biasing_replacement_oracle",
)
TEXT_APPROACHES = ("biasing_text_replacement", "biasing_text_replacement_oracle")
REPLACEMENT_APPROACHES = ("biasing_replacement", "biasing_replacement_oracle")
DEFAULT_BOOSTS = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
DEFAULT_DISTRACTORS = (0, 10, 100, 250)


@dataclass(frozen=True)
class ExperimentConfig:
    test_path: str = ""
    checkpoint_path: str = ""
    approaches: tuple[str, ...] = APPROACHES
    boosts: tuple[float, ...] = DEFAULT_BOOSTS
    distractors: tuple[int, ...] = DEFAULT_DISTRACTORS
    beam_size: int = 4
    seed: int = 42
    cache_dir: str | None = None

    def __post_init__(self):
        if not self.approaches:
            raise ConfigError("approaches must be non-empty")
        unknown = [a for a in self.approaches if a not in APPROACHES]
        if unknown:
            raise ConfigError(f"unknown approaches {unknown}; valid: {APPROACHES}")
        if not self.boosts or any(b < 0 for b in self.boosts):
            raise ConfigError("boost values must be non-empty and >= 0")
        if not self.distractors or any(d < 0 for d in self.distractors):
            raise ConfigError("distractor counts must be non-empty and >= 0")
        if self.beam_size < 1:
            raise ConfigError("beam size must be >= 1")
        object.__setattr__(self, "approaches", tuple(self.approaches))
        object.__setattr__(self, "boosts",
                           tuple(sorted({float(b) for b in self.boosts})))
        object.__setattr__(self, "distractors",
                           tuple(sorted({int(d) for d in self.distractors})))


def config_from_json(text: str) -> ExperimentConfig:
    """Build an ExperimentConfig from a JSON object with matching keys."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError("config JSON must be an object")
    allowed = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    for key in ("approaches", "boosts", "distractors"):
        if key in obj:
            obj[key] = tuple(obj[key])
    return ExperimentConfig(**obj)


@dataclass(frozen=True)
class CellResult:
    approach: str
    boost: float
    distractors: int
    hyps: tuple[str, ...]  # one hypothesis per utterance, corpus order
    metrics: CellMetrics


@dataclass(frozen=True)
class EvalReport:
    cells: tuple[CellResult, ...]
    utterance_ids: tuple[str, ...]
    seed: int
    beam_size: int

    def cell(self, approach: str, boost: float, distractors: int) -> CellResult:
        for c in self.cells:
            if (c.approach, c.boost, c.distractors) == (approach, float(boost),
                                                        int(distractors)):
                return c
        raise KeyError(f"no cell ({approach}, boost={boost}, d={distractors})")


# -- replacement construction --------------------------------------------------


def build_replacements(utterances: list[Utterance], hypotheses: list[str],
                       oracle: bool = False) -> dict[str, tuple[tuple[str, str], ...]]:
    """Mine (wrong surface, new word) pairs from first-pass hypotheses.

    For each utterance and each of its new words: non-oracle mode attaches
    the pairs extracted from OTHER utterances containing that word, oracle
    mode the pairs extracted from the utterance itself. Pairs deduplicate
    by (detect, output) per utterance, preserving corpus order.
    """
    if len(utterances) != len(hypotheses):
        raise ContractError(f"{len(utterances)} utterances but "
                            f"{len(hypotheses)} hypotheses")
    extracted: dict[str, list[tuple[str, str]]] = {}
    for utt, hyp in zip(utterances, hypotheses):
        alignment = align(utt.text.split(), hyp.split())
        extracted[utt.id] = extract_substitutions(alignment, utt.new_words)

    by_word: dict[str, list[tuple[str, str, str]]] = {}
    for utt in utterances:
        for detect, target in extracted[utt.id]:
            by_word.setdefault(target, []).append((detect, target, utt.id))
    for word, found in by_word.items():
        surfaces = {detect for detect, _, _ in found}
        if len(surfaces) > 1:
            log.info("new word %r was misrecognized as %d distinct surfaces: %s",
                     word, len(surfaces), sorted(surfaces))

    out: dict[str, tuple[tuple[str, str], ...]] = {}
    for utt in utterances:
        pairs: list[tuple[str, str]] = []
        seen: set[tuple[str, str]] = set()
        for word in utt.new_words:
            for detect, target, source_id in by_word.get(word, ()):
                if (source_id == utt.id) != oracle:
                    continue
                if (detect, target) in seen or detect == target:
                    continue
                seen.add((detect, target))
                pairs.append((detect, target))
        out[utt.id] = tuple(pairs)
    return out


def replacement_entries(pairs: tuple[tuple[str, str], ...],
                        oracle: bool) -> list[BiasEntry]:
    source = "oracle-replacement" if oracle else "replacement"
    return [make_entry(output, detect=detect, source=source)
            for detect, output in pairs]


# -- distractors ---------------------------------------------------------------


def distractor_pool(utterances: list[Utterance]) -> list[BiasEntry]:
    """All new words across the corpus, first-seen order, as plain entries."""
    seen: set[str] = set()
    pool: list[BiasEntry] = []
    for utt in utterances:
        for word in utt.new_words:
            if word not in seen:
                seen.add(word)
                pool.append(make_entry(word, source="distractor"))
    return pool


def distractor_entries(pool: list[BiasEntry], utt: Utterance, count: int,
                       seed: int) -> list[BiasEntry]:
    """The fixed distractor draw for (seed, utterance, count); never
    contains the utterance's own new words."""
    if count == 0:
        return []
    rng = Rng(derive_seed("distractors", seed, utt.id, count))
    exclude = [make_entry(w) for w in utt.new_words]
    return sample_distractors(pool, count, exclude, rng)


# -- the grid ------------------------------------------------------------------


def _cell_key(approach: str, boost: float, distractors: int) -> tuple:
    return (approach, float(boost), int(distractors))


class _CellCache:
    """One JSON file of hypotheses per decoded cell, so an interrupted
    grid resumes without repeating finished decodes."""

    def __init__(self, cache_dir, utterances: list[Utterance],
                 config: ExperimentConfig):
        self.dir = Path(cache_dir) if cache_dir else None
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)
        digest_src = json.dumps([list(u.id for u in utterances),
                                 config.beam_size, config.seed])
        self.digest = hashlib.blake2b(digest_src.encode(), digest_size=8).hexdigest()

    def _path(self, key: tuple) -> Path:
        approach, boost, distractors = key
        return self.dir / f"{approach}-b{boost:g}-d{distractors}.json"

    def load(self, key: tuple) -> list[str] | None:
        if not self.dir:
            return None
        path = self._path(key)
        if not path.exists():
            return None
        obj = json.loads(path.read_text())
        if obj.get("digest") != self.digest:
            raise ContractError(f"cache file {path} was built for a different "
                                "corpus, beam size, or seed; clear the cache")
        return list(obj["hyps"])

    def store(self, key: tuple, hyps: list[str]) -> None:
        if not self.dir:
            return
        approach, boost, distractors = key
        obj = {"approach": approach, "boost": boost, "distractors": distractors,
               "digest": self.digest, "hyps": list(hyps)}
        self._path(key).write_text(json.dumps(obj, indent=1, sort_keys=True))


def _decode_cells_needed(config: ExperimentConfig) -> set[tuple]:
    """Beam-search cells the grid needs, including internal dependencies."""
    needed: set[tuple] = set()
    want_text = any(a in config.approaches for a in TEXT_APPROACHES)
    want_repl = any(a in config.approaches for a in REPLACEMENT_APPROACHES)
    for approach in config.approaches:
        if approach == "no_biasing":
            needed.add(_cell_key(approach, 0.0, 0))
        elif approach in ("biasing", "biasing_boost_all", *REPLACEMENT_APPROACHES):
            for boost in config.boosts:
                for d in config.distractors:
                    needed.add(_cell_key(approach, boost, d))
    if want_text:
        for d in config.distractors:
            needed.add(_cell_key("biasing", 0.0, d))
    if want_text or want_repl:
        needed.add(_cell_key("biasing", 0.0, 0))
    return needed


def _gold_entries(utt: Utterance) -> list[BiasEntry]:
    return [make_entry(w) for w in utt.new_words]


def _search(model: Model, utt: Utterance, engine, ctx, boost: float, mode: str,
            beam_size: int) -> str:
    best, _ = beam_search(model, utt.audio, ctx, beam_size=beam_size,
                          boost=boost, mode=mode, engine=engine)
    return best.text()


def run_experiment(config: ExperimentConfig, model: Model | None = None,
                   utterances: list[Utterance] | None = None,
                   progress=None) -> EvalReport:
    """Decode and score every requested (approach, boost, distractors) cell.

    model and utterances override the config paths when given (the CLI
    always loads from the paths). progress, if given, is called with a
    one-line status string as work proceeds.
    """
    if utterances is None:
        utterances = load_corpus(config.test_path)
    if model is None:
        model = model_from_checkpoint(load_checkpoint(config.checkpoint_path))
    if not utterances:
        raise ContractError("the evaluation corpus is empty")
    say = progress or (lambda s: None)

    cache = _CellCache(config.cache_dir, utterances, config)
    pool = distractor_pool(utterances)
    hyps: dict[tuple, list[str]] = {}
    needed = _decode_cells_needed(config)
    missing: set[tuple] = set()
    for key in needed:
        cached = cache.load(key)
        if cached is not None:
            if len(cached) != len(utterances):
                raise ContractError(f"cache for {key} holds {len(cached)} "
                                    f"hypotheses for {len(utterances)} utterances")
            hyps[key] = cached
        else:
            missing.add(key)

    def run_group(keys: list[tuple], lists_for) -> None:
        """Decode the given cells; lists_for(utt, d) -> entry list | None
        (None means the empty list). One context encoding and one engine
        per (utterance, distractor count), shared across boosts/modes."""
        if not keys:
            return
        outs: dict[tuple, list[str]] = {key: [] for key in keys}
        by_d: dict[int, list[tuple]] = {}
        for key in keys:
            by_d.setdefault(key[2], []).append(key)
        for d, group in sorted(by_d.items()):
            say(f"decoding {len(group)} cells at {d} distractors: "
                + ", ".join(sorted({k[0] for k in group})))
            for utt in utterances:
                ctx = encode_context(model, build_list(lists_for(utt, d) or []))
                engine = CachedEngine(model, utt.audio, ctx)
                for key in sorted(group):
                    approach, boost, _ = key
                    mode = "all" if approach == "biasing_boost_all" else "next"
                    outs[key].append(_search(model, utt, engine, ctx, boost,
                                             mode, config.beam_size))
        for key in keys:
            hyps[key] = outs[key]
            cache.store(key, outs[key])

    # stage 1: plain decode, no list
    run_group([k for k in missing if k[0] == "no_biasing"], lambda utt, d: None)

    # stage 2: gold + distractor lists; the boost-0 zero-distractor cell
    # here is the first pass that replacement mining reads
    run_group([k for k in missing if k[0] in ("biasing", "biasing_boost_all")],
              lambda utt, d: _gold_entries(utt)
              + distractor_entries(pool, utt, d, config.seed))

    pairs_other = pairs_same = None
    want_repl = any(a in config.approaches for a in REPLACEMENT_APPROACHES)
    want_text = any(a in config.approaches for a in TEXT_APPROACHES)
    if want_repl or want_text:
        pass1 = hyps[_cell_key("biasing", 0.0, 0)]
        pairs_other = build_replacements(utterances, pass1, oracle=False)
        pairs_same = build_replacements(utterances, pass1, oracle=True)

    # stage 3: lists extended with mined replacement entries
    for approach in REPLACEMENT_APPROACHES:
        oracle = approach.endswith("oracle")
        pairs = pairs_same if oracle else pairs_other

        def with_replacements(utt, d, pairs=pairs, oracle=oracle):
            return (_gold_entries(utt)
                    + replacement_entries(pairs[utt.id], oracle)
                    + distractor_entries(pool, utt, d, config.seed))

        run_group([k for k in missing if k[0] == approach], with_replacements)

    # text approaches: string post-processing of the boost-0 biasing cells
    refs = [utt.text.split() for utt in utterances]
    vocabs = [set(utt.new_words) for utt in utterances]

    def scored(approach, boost, d, cell_hyps) -> CellResult:
        alignments = [align(ref, hyp.split()) for ref, hyp in zip(refs, cell_hyps)]
        return CellResult(approach=approach, boost=float(boost), distractors=int(d),
                          hyps=tuple(cell_hyps),
                          metrics=evaluate(alignments, vocabs))

    cells: list[CellResult] = []
    for approach in APPROACHES:
        if approach not in config.approaches:
            continue
        if approach == "no_biasing":
            cells.append(scored(approach, 0.0, 0, hyps[_cell_key(approach, 0.0, 0)]))
        elif approach in TEXT_APPROACHES:
            pairs = pairs_same if approach.endswith("oracle") else pairs_other
            for d in config.distractors:
                base = hyps[_cell_key("biasing", 0.0, d)]
                rewritten = [apply_text_replacements(h, pairs[utt.id])
                             for utt, h in zip(utterances, base)]
                cells.append(scored(approach, 0.0, d, rewritten))
        else:
            for boost in config.boosts:
                for d in config.distractors:
                    cells.append(scored(approach, boost, d,
                                        hyps[_cell_key(approach, boost, d)]))
    say("grid complete")
    return EvalReport(cells=tuple(cells),
                      utterance_ids=tuple(u.id for u in utterances),
                      seed=config.seed, beam_size=config.beam_size)


# -- report serialization and rendering ----------------------------------------


def report_to_json(report: EvalReport) -> str:
    obj = {
        "seed": report.seed,
        "beam_size": report.beam_size,
        "utterance_ids": list(report.utterance_ids),
        "cells": [
            {"approach": c.approach, "boost": c.boost, "distractors": c.distractors,
             "hyps": list(c.hyps), "metrics": c.metrics.to_dict()}
            for c in report.cells
        ],
    }
    return json.dumps(obj, indent=1, sort_keys=True)


def report_from_json(text: str) -> EvalReport:
    obj = json.loads(text)
    cells = tuple(
        CellResult(approach=c["approach"], boost=float(c["boost"]),
                   distractors=int(c["distractors"]), hyps=tuple(c["hyps"]),
                   metrics=CellMetrics.from_dict(c["metrics"]))
        for c in obj["cells"]
    )
    return EvalReport(cells=cells, utterance_ids=tuple(obj["utterance_ids"]),
                      seed=obj["seed"], beam_size=obj["beam_size"])


def _fmt_rate(value: float | None) -> str:
    return "     -" if value is None else f"{100.0 * value:6.2f}"


def _fmt_cell(m: CellMetrics, best: bool) -> str:
    text = (f"{_fmt_rate(m.bwer)}/{_fmt_rate(m.uwer)}/"
            f"{_fmt_rate(m.wer)}/{m.f1:4.2f}")
    return text + ("*" if best else " ")


def render_report(report: EvalReport) -> str:
    """Fixed-width grid: one block per approach, rows over boosts, columns
    over distractor counts. Cells read BWER/UWER/WER as percentages and
    F1 as a fraction, two decimals each; the first cell reaching the
    block's lowest BWER is starred."""
    ds = sorted({c.distractors for c in report.cells})
    width = 30
    lines = []
    header = f"{'approach':<32}{'boost':>6}  " + "".join(
        f"{f'd={d}':>{width}}" for d in ds)
    lines.append(header)
    lines.append("-" * len(header))
    for approach in APPROACHES:
        block = sorted((c for c in report.cells if c.approach == approach),
                       key=lambda c: (c.boost, c.distractors))
        if not block:
            continue
        with_bwer = [c for c in block if c.metrics.bwer is not None]
        starred = min(with_bwer, key=lambda c: c.metrics.bwer, default=None)
        for boost in sorted({c.boost for c in block}):
            row = f"{approach:<32}{boost:>6g}  "
            for d in ds:
                match = [c for c in block
                         if c.boost == boost and c.distractors == d]
                if match:
                    c = match[0]
                    row += f"{_fmt_cell(c.metrics, c is starred):>{width}}"
                else:
                    row += f"{'':>{width}}"
            lines.append(row.rstrip())
    return "\n".join(lines) + "\n"


# -- interactive correction session --------------------------------------------

SESSION_HELP = ("commands: next | correct <wrong> -> <right> | list | "
                "boost <value> | quit")


@dataclass
class SessionState:
    """Everything a correction session accumulates; the active biasing
    list for any utterance is a pure function of this state."""

    index: int = 0  # next utterance to decode
    boost: float = 0.0
    mode: str = "next"
    beam_size: int = 4
    pairs: tuple[tuple[str, str], ...] = ()  # user corrections, oldest first
    decoded: tuple[tuple[str, str], ...] = ()  # (utterance id, hypothesis)


def session_entries(utt: Utterance, state: SessionState) -> ContextBiasingList:
    """Gold new words plus every accumulated correction as a replacement
    entry; corrections therefore steer all utterances decoded after them."""
    entries = [make_entry(w) for w in utt.new_words]
    entries += [make_entry(output, detect=detect, source="replacement")
                for detect, output in state.pairs]
    return build_list(entries)


def _parse_correction(rest: str) -> tuple[str, str] | None:
    if "->" not in rest:
        return None
    wrong, _, right = rest.partition("->")
    wrong, right = normalize(wrong), normalize(right)
    if not wrong or not right or wrong == right:
        return None
    return wrong, right


def run_session(model: Model, utterances: list[Utterance], commands,
                echo=print, log_path=None, boost: float = 0.0,
                mode: str = "next", beam_size: int = 4) -> SessionState:
    """Drive the correction loop over a command iterable.

    Commands: next (decode the next utterance and show the hypothesis),
    correct <wrong> -> <right> (register a replacement applied to all
    later utterances), list (show corrections and parameters), boost
    <value>, quit. Malformed input prints help and changes nothing.
    Accepted commands and decodes are logged as JSON lines when log_path
    is given; replay_session reconstructs the final state from that log.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    state = SessionState(boost=float(boost), mode=mode, beam_size=beam_size)
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None

    def record(event: dict) -> None:
        if log_file:
            log_file.write(json.dumps(event) + "\n")
            log_file.flush()

    record({"event": "start", "boost": state.boost, "mode": state.mode,
            "beam_size": state.beam_size, "n_utterances": len(utterances)})
    try:
        for raw in commands:
            line = raw.strip()
            if not line:
                continue
            verb, _, rest = line.partition(" ")
            rest = rest.strip()
            if verb == "next" and not rest:
                if state.index >= len(utterances):
                    echo("end of utterances")
                    continue
                utt = utterances[state.index]
                blist = session_entries(utt, state)
                ctx = encode_context(model, blist)
                best, _ = beam_search(model, utt.audio, ctx,
                                      beam_size=state.beam_size,
                                      boost=state.boost, mode=state.mode)
                hyp = best.text()
                state.index += 1
                state.decoded = state.decoded + ((utt.id, hyp),)
                record({"event": "command", "line": line})
                record({"event": "decode", "id": utt.id, "hyp": hyp,
                        "boost": state.boost, "entries": len(blist)})
                echo(f"[{utt.id}] {hyp}")
            elif verb == "correct":
                pair = _parse_correction(rest)
                if pair is None:
                    echo(SESSION_HELP)
                    continue
                state.pairs = state.pairs + (pair,)
                record({"event": "command", "line": line})
                record({"event": "correct", "detect": pair[0], "output": pair[1]})
                echo(f"will rewrite {pair[0]!r} -> {pair[1]!r} from the next "
                     "utterance on")
            elif verb == "list" and not rest:
                record({"event": "command", "line": line})
                echo(f"boost={state.boost:g} mode={state.mode} "
                     f"beam={state.beam_size} corrections={len(state.pairs)}")
                for detect, output in state.pairs:
                    echo(f"  {detect} -> {output}")
            elif verb == "boost":
                try:
                    value = float(rest)
                except ValueError:
                    echo(SESSION_HELP)
                    continue
                if value < 0:
                    echo(SESSION_HELP)
                    continue
                state.boost = value
                record({"event": "command", "line": line})
                record({"event": "boost", "value": value})
                echo(f"boost set to {value:g}")
            elif verb == "quit" and not rest:
                record({"event": "command", "line": line})
                break
            else:
                echo(SESSION_HELP)
    finally:
        if log_file:
            log_file.close()
    return state


def replay_session(model: Model, utterances: list[Utterance],
                   log_path) -> SessionState:
    """Re-run the accepted commands from a session log; decoding is
    deterministic, so the result equals the original final state."""
    start = None
    lines = []
    with open(log_path, "r", encoding="utf-8") as f:
        for raw in f:
            raw = raw.strip()
            if not raw:
                continue
            event = json.loads(raw)
            if event["event"] == "start":
                start = event
            elif event["event"] == "command":
                lines.append(event["line"])
    if start is None:
        raise ContractError(f"session log {log_path} has no start event")
    return run_session(model, utterances, lines, echo=lambda *_: None,
                       log_path=None, boost=start["boost"], mode=start["mode"],
                       beam_size=start["beam_size"])
