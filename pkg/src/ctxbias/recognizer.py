"""Scikit-learn style estimator facade over the full recognizer.

ContextBiasedRecognizer bundles model construction, two-phase training,
and biased beam-search decoding behind fit/predict/transform with
get_params/set_params/clone support. It is an adapter: the underlying
modules do the work, and this class validates inputs in the sklearn
dialect (ValueError for bad data, NotFittedError before fit).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .biasing import BiasEntry, ContextBiasingList, build_list, make_entry, normalize
from .decoding import MODES, CachedEngine, beam_search
from .metrics import align, wer
from .model import ModelConfig, encode_context
from .synthdata import Lexicon, Utterance
from .training import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)


class ContextBiasedRecognizer(BaseEstimator):
    """Attention-based recognizer with a runtime-editable biasing list.

    fit() trains on (audio token sequences, transcripts) or on Utterance
    records; predict() decodes audio to text, optionally steered by a
    list of bias phrases or replacement pairs and a log-prob boost.
    """

    def __init__(self, d_model=64, n_heads=4, encoder_layers=2, decoder_layers=2,
                 ffw_dim=128, score_loss_weight=1.0, max_audio_len=160,
                 max_text_len=128, batch_size=16, lr=3e-4, warmup_steps=100,
                 phase_a_steps=4000, phase_b_steps=1500, beam_size=4,
                 boost=0.0, boost_mode="next", seed=42):
        self.d_model = d_model
        self.n_heads = n_heads
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.ffw_dim = ffw_dim
        self.score_loss_weight = score_loss_weight
        self.max_audio_len = max_audio_len
        self.max_text_len = max_text_len
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.phase_a_steps = phase_a_steps
        self.phase_b_steps = phase_b_steps
        self.beam_size = beam_size
        self.boost = boost
        self.boost_mode = boost_mode
        self.seed = seed

    # -- config assembly -------------------------------------------------

    def _model_config(self) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_heads=self.n_heads,
                           encoder_layers=self.encoder_layers,
                           decoder_layers=self.decoder_layers,
                           ffw_dim=self.ffw_dim,
                           max_audio_len=self.max_audio_len,
                           max_text_len=self.max_text_len,
                           score_loss_weight=self.score_loss_weight)

    def _train_config(self, corruption: bool) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, lr=self.lr,
                           warmup_steps=self.warmup_steps,
                           phase_a_steps=self.phase_a_steps,
                           phase_b_steps=self.phase_b_steps,
                           corrupt_prob=0.5 if corruption else 0.0)

    # -- validation ------------------------------------------------------

    def _check_audio(self, X) -> list[tuple[int, ...]]:
        config = self.model_.config
        out = []
        for i, seq in enumerate(X):
            ids = tuple(int(t) for t in seq)
            if not ids:
                raise ValueError(f"audio sequence {i} is empty")
            if any(t < 1 or t >= config.audio_vocab for t in ids):
                raise ValueError(f"audio sequence {i} has ids outside "
                                 f"[1, {config.audio_vocab})")
            if len(ids) > config.max_audio_len:
                raise ValueError(f"audio sequence {i} has length {len(ids)} > "
                                 f"max_audio_len {config.max_audio_len}")
            out.append(ids)
        return out

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this ContextBiasedRecognizer is not fitted; "
                                 "call fit or load first")

    @staticmethod
    def _as_bias_list(bias) -> ContextBiasingList:
        if bias is None:
            return build_list([])
        if isinstance(bias, ContextBiasingList):
            return bias
        entries = [e if isinstance(e, BiasEntry) else make_entry(str(e)) for e in bias]
        return build_list(entries)

    # -- estimator API ---------------------------------------------------

    def fit(self, X, y=None, lexicon: Lexicon | None = None,
            corpus_seed: int | None = None):
        """Train both phases.

        Either X is a sequence of Utterance records (y must be None), or
        X is a sequence of audio token sequences and y the matching
        transcripts. Span-corruption training needs the originating
        lexicon and corpus seed to re-derive word spans, so it is only
        active on the Utterance path with lexicon given.
        """
        if X is not None and len(X) and isinstance(X[0], Utterance):
            if y is not None:
                raise ValueError("y must be None when X holds Utterance records")
            utts = list(X)
            corruption = lexicon is not None
        else:
            if y is None:
                raise ValueError("y (transcripts) is required for raw audio X")
            if len(X) != len(y):
                raise ValueError(f"X has {len(X)} sequences but y has {len(y)} texts")
            utts = [Utterance(f"fit-{i:05d}", tuple(int(t) for t in seq),
                              normalize(text), ())
                    for i, (seq, text) in enumerate(zip(X, y))]
            corruption = False
        if not utts:
            raise ValueError("cannot fit on an empty dataset")

        result = train(utts, lexicon, self._model_config(),
                       self._train_config(corruption),
                       seed=self.seed if corpus_seed is None else corpus_seed)
        self.model_ = result.model
        self.checkpoint_ = result.checkpoint
        self.phase_a_losses_ = result.phase_a_losses
        self.phase_b_losses_ = result.phase_b_losses
        self.val_token_loss_ = result.val_token_loss
        self.val_score_accuracy_ = result.val_score_accuracy
        return self

    def predict(self, X, bias=None, boost=None, mode=None) -> list[str]:
        """Decode each audio sequence to text.

        bias: None, a ContextBiasingList, or an iterable of phrases /
        BiasEntry records shared by every sequence. boost and mode
        default to the constructor values.
        """
        self._check_fitted()
        boost = self.boost if boost is None else float(boost)
        mode = self.boost_mode if mode is None else mode
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if boost < 0:
            raise ValueError(f"boost must be >= 0, got {boost}")
        audio = self._check_audio(X)
        blist = self._as_bias_list(bias)
        ctx = encode_context(self.model_, blist)
        out = []
        for seq in audio:
            engine = CachedEngine(self.model_, seq, ctx)
            best, _ = beam_search(self.model_, seq, ctx, beam_size=self.beam_size,
                                  boost=boost, mode=mode, engine=engine)
            out.append(best.text())
        return out

    def transform(self, X) -> list[str]:
        """Pipeline-friendly alias of predict with the stored settings."""
        return self.predict(X)

    def score(self, X, y, bias=None) -> float:
        """Word accuracy, 1 - WER, against reference transcripts."""
        self._check_fitted()
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} sequences but y has {len(y)} texts")
        if not len(X):
            raise ValueError("cannot score an empty dataset")
        hyps = self.predict(X, bias=bias)
        alignments = [align(normalize(ref).split(), hyp.split())
                      for ref, hyp in zip(y, hyps)]
        return 1.0 - wer(alignments)

    # -- persistence -----------------------------------------------------

    def save(self, path) -> None:
        self._check_fitted()
        save_checkpoint(self.checkpoint_, path)

    @classmethod
    def load(cls, path) -> "ContextBiasedRecognizer":
        """Rebuild a fitted recognizer from a checkpoint file. Training
        hyperparameters not stored in the file keep their defaults."""
        ckpt = load_checkpoint(path)
        est = cls(d_model=ckpt.config.d_model, n_heads=ckpt.config.n_heads,
                  encoder_layers=ckpt.config.encoder_layers,
                  decoder_layers=ckpt.config.decoder_layers,
                  ffw_dim=ckpt.config.ffw_dim,
                  score_loss_weight=ckpt.config.score_loss_weight,
                  max_audio_len=ckpt.config.max_audio_len,
                  max_text_len=ckpt.config.max_text_len)
        est.model_ = model_from_checkpoint(ckpt)
        est.checkpoint_ = ckpt
        return est
