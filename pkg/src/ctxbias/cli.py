"""Command line front end.

Subcommands: gen-data (write the synthetic dataset), train (two-phase
training to a checkpoint plus a loss-curve CSV), decode (hypotheses for a
corpus as JSON lines), eval (score a hypothesis file against references),
experiment (the full approach/boost/distractor grid), and session (the
interactive correction loop). Every command exits 0 on success and 1 with
a message on stderr otherwise.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from .biasing import build_list, load_list, make_entry
from .decoding import MODES, CachedEngine, beam_search
from .errors import ConfigError, ContractError
from .harness import (
    ExperimentConfig,
    config_from_json,
    render_report,
    report_to_json,
    run_experiment,
    run_session,
)
from .metrics import align, evaluate
from .model import ModelConfig, encode_context
from .synthdata import default_dataset, load_corpus, load_lexicon
from .training import (
    TrainConfig,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)

_ERRORS = (ValueError, RuntimeError, FloatingPointError, OSError)


def _csv_values(text: str, convert, what: str) -> tuple:
    try:
        return tuple(convert(part) for part in text.split(","))
    except ValueError as e:
        raise ConfigError(f"cannot parse {what} {text!r}: "
                          "expected comma-separated numbers") from e


def _load_model(path: str):
    return model_from_checkpoint(load_checkpoint(path))


def _cmd_gen_data(args) -> int:
    paths = default_dataset(args.out, seed=args.seed, n_regular=args.n_regular,
                            n_train=args.n_train, n_test=args.n_test)
    for name in ("lexicon", "train", "test"):
        print(f"wrote {paths[name]}")
    return 0


def _section(obj: dict, key: str, cls):
    """Build a config dataclass from one section of the train config JSON."""
    section = obj.get(key, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {key!r} must be an object")
    unknown = set(section) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {key} config keys {sorted(unknown)}")
    if "phrase_lens" in section:
        section["phrase_lens"] = tuple(section["phrase_lens"])
    return cls(**section)


def _train_configs(path: str | None) -> tuple[ModelConfig, TrainConfig]:
    if path is None:
        return ModelConfig(), TrainConfig()
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError("train config JSON must be an object")
    unknown = set(obj) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}; "
                          "expected 'model' and 'train'")
    return _section(obj, "model", ModelConfig), _section(obj, "train", TrainConfig)


def _cmd_train(args) -> int:
    data = Path(args.data)
    lexicon = load_lexicon(data / "lexicon.jsonl")
    utterances = load_corpus(data / "train.jsonl")
    model_config, train_config = _train_configs(args.config)
    result = train(utterances, lexicon, model_config, train_config,
                   seed=args.seed)
    save_checkpoint(result.checkpoint, args.out)
    csv_path = Path(args.out).with_suffix(".losses.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["phase", "step", "loss"])
        for phase, losses in (("A", result.phase_a_losses),
                              ("B", result.phase_b_losses)):
            for step, loss in enumerate(losses, 1):
                writer.writerow([phase, step, loss])
    print(f"wrote {args.out}")
    print(f"wrote {csv_path}")
    print(f"validation: token loss {result.val_token_loss:.4f}, "
          f"context score accuracy {result.val_score_accuracy:.4f}")
    return 0


def _bias_list_for(utt, spec: str, shared):
    if spec == "none":
        return build_list([])
    if spec == "gold":
        return build_list([make_entry(w) for w in utt.new_words])
    return shared


def _cmd_decode(args) -> int:
    model = _load_model(args.checkpoint)
    utterances = load_corpus(args.data)
    shared = None
    if args.bias not in ("none", "gold"):
        shared = load_list(args.bias)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for utt in utterances:
            ctx = encode_context(model, _bias_list_for(utt, args.bias, shared))
            engine = CachedEngine(model, utt.audio, ctx)
            best, _ = beam_search(model, utt.audio, ctx, beam_size=args.beam,
                                  boost=args.boost, mode=args.mode,
                                  engine=engine)
            out.write(json.dumps({"id": utt.id, "text": best.text()}) + "\n")
    finally:
        if args.out:
            out.close()
    if args.out:
        print(f"wrote {args.out}")
    return 0


def _load_hypotheses(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out[obj["id"]] = obj["text"]
    return out


def _cmd_eval(args) -> int:
    utterances = load_corpus(args.data)
    hyps = _load_hypotheses(args.hyps)
    missing = [u.id for u in utterances if u.id not in hyps]
    if missing:
        raise ContractError(f"no hypothesis for utterance ids {missing[:5]}"
                            + ("..." if len(missing) > 5 else ""))
    extra = set(hyps) - {u.id for u in utterances}
    if extra:
        raise ContractError(f"hypotheses for unknown ids {sorted(extra)[:5]}")
    alignments = [align(u.text.split(), hyps[u.id].split()) for u in utterances]
    vocabs = [set(u.new_words) for u in utterances]
    metrics = evaluate(alignments, vocabs)

    def pct(v):
        return "-" if v is None else f"{100.0 * v:.2f}%"

    print(f"WER {pct(metrics.wer)}  BWER {pct(metrics.bwer)}  "
          f"UWER {pct(metrics.uwer)}  F1 {metrics.f1:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(metrics.to_dict(), indent=1,
                                             sort_keys=True))
        print(f"wrote {args.out}")
    return 0


def _cmd_experiment(args) -> int:
    if args.config:
        config = config_from_json(Path(args.config).read_text())
    else:
        config = ExperimentConfig()
    overrides = {}
    if args.data:
        overrides["test_path"] = args.data
    if args.checkpoint:
        overrides["checkpoint_path"] = args.checkpoint
    if args.boost is not None:
        overrides["boosts"] = _csv_values(args.boost, float, "boost values")
    if args.distractors is not None:
        overrides["distractors"] = _csv_values(args.distractors, int,
                                               "distractor counts")
    if args.beam is not None:
        overrides["beam_size"] = args.beam
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.cache:
        overrides["cache_dir"] = args.cache
    config = dataclasses.replace(config, **overrides)
    if not config.test_path or not config.checkpoint_path:
        raise ConfigError("experiment needs --data and --checkpoint "
                          "(or test_path/checkpoint_path in the config file)")
    report = run_experiment(config, progress=lambda s: print(s, file=sys.stderr))
    print(render_report(report), end="")
    if args.out:
        Path(args.out).write_text(report_to_json(report))
        print(f"wrote {args.out}")
    return 0


def _cmd_session(args) -> int:
    model = _load_model(args.checkpoint)
    utterances = load_corpus(args.data)
    print(f"{len(utterances)} utterances loaded; commands: next | "
          "correct <wrong> -> <right> | list | boost <value> | quit")
    run_session(model, utterances, sys.stdin, log_path=args.log,
                boost=args.boost, mode=args.mode, beam_size=args.beam)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxbias",
        description="Contextual biasing on synthetic speech-like data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--n-regular", type=int, default=600)
    p.add_argument("--n-train", type=int, default=8000)
    p.add_argument("--n-test", type=int, default=400)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True,
                   help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--config", help="JSON with 'model' and 'train' sections")
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("decode", help="decode a corpus to hypothesis JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus JSONL")
    p.add_argument("--bias", default="none",
                   help="'none', 'gold' (each utterance's own new words), "
                        "or a biasing list JSONL path")
    p.add_argument("--boost", type=float, default=0.0)
    p.add_argument("--mode", choices=MODES, default="next")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--out", help="output path (default stdout)")
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("eval", help="score a hypothesis file against a corpus")
    p.add_argument("--data", required=True, help="reference corpus JSONL")
    p.add_argument("--hyps", required=True, help="hypothesis JSONL from decode")
    p.add_argument("--out", help="write metrics JSON here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("experiment", help="run the evaluation grid")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="test corpus JSONL")
    p.add_argument("--config", help="JSON mirroring the experiment config")
    p.add_argument("--boost", help="comma-separated boost values")
    p.add_argument("--distractors", help="comma-separated distractor counts")
    p.add_argument("--beam", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--cache", help="cell cache directory for resumable runs")
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("session", help="interactive correction session")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus JSONL")
    p.add_argument("--boost", type=float, default=0.0)
    p.add_argument("--mode", choices=MODES, default="next")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--log", help="write the session JSONL log here")
    p.set_defaults(func=_cmd_session)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
