"""Contextual-biasing speech recognition toolkit on a numpy autodiff core."""

from .biasing import BiasEntry, ContextBiasingList, build_list, load_list, make_entry, save_list
from .decoding import CachedEngine, ReferenceEngine, apply_boost, beam_search
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    GenerationError,
    MetricError,
    NonFiniteError,
    ShapeError,
)
from .harness import EvalReport, ExperimentConfig, render_report, run_experiment
from .metrics import align, alignment_errors, evaluate
from .model import Model, ModelConfig, encode_context, forward_batch, init_model
from .recognizer import ContextBiasedRecognizer
from .synthdata import Lexicon, Utterance, default_dataset, gen_corpus, gen_lexicon, regular_g2p
from .training import TrainConfig, load_checkpoint, model_from_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BiasEntry",
    "CachedEngine",
    "CheckpointError",
    "ConfigError",
    "ContextBiasedRecognizer",
    "ContextBiasingList",
    "ContractError",
    "EvalReport",
    "ExperimentConfig",
    "GenerationError",
    "Lexicon",
    "MetricError",
    "Model",
    "ModelConfig",
    "NonFiniteError",
    "ReferenceEngine",
    "ShapeError",
    "TrainConfig",
    "Utterance",
    "align",
    "alignment_errors",
    "apply_boost",
    "beam_search",
    "build_list",
    "default_dataset",
    "encode_context",
    "evaluate",
    "forward_batch",
    "gen_corpus",
    "gen_lexicon",
    "init_model",
    "load_checkpoint",
    "load_list",
    "make_entry",
    "model_from_checkpoint",
    "regular_g2p",
    "render_report",
    "run_experiment",
    "save_checkpoint",
    "save_list",
    "train",
]
