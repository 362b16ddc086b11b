"""Encoder-decoder transformer with gated context-attention sublayers.

Architecture, smallest useful sizes: post-norm transformer, sinusoidal
positions, d_model 64, 4 heads, 2+2 layers. Each decoder layer runs
self-attention, cross-attention over the audio memory, then a
context-attention sublayer, then the feed-forward block.

The context-attention sublayer is the biasing mechanism. A bias list of
L entries is encoded once into L+1 summary vectors (row 0 is a learned
"no match" dummy). Per position the sublayer scores the summaries with
learned query/key projections, hard-argmaxes the winner, and

  * winner 0: passes the input through unchanged (bitwise), so an empty
    or irrelevant list cannot perturb the model;
  * winner n > 0: adds single-head attention over entry n's raw output
    token embeddings (no positions, no output projection, no norm).

Replacement entries split the two roles: the summary comes from the
detect surface (what the model tends to write) while the attention
values come from the output surface (what it should write).

Winners are chosen independently per position and layer; exact score
ties go to the lower index, so the dummy wins ties. Gradients reach the
score projections only through the auxiliary score loss; the value path
trains through the token loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .biasing import BOS_ID, EOS_ID, TEXT_VOCAB_SIZE, ContextBiasingList, tokenize
from .errors import ConfigError, ContractError
from .rng import Rng
from .synthdata import AUDIO_VOCAB_SIZE
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64  # residual width
    n_heads: int = 4  # heads in self/cross attention
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffw_dim: int = 128  # feed-forward hidden width
    audio_vocab: int = AUDIO_VOCAB_SIZE
    text_vocab: int = TEXT_VOCAB_SIZE
    max_audio_len: int = 160
    max_text_len: int = 128
    score_loss_weight: float = 1.0  # weight of the context-score CE term

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.decoder_layers < 1 or self.encoder_layers < 1:
            raise ConfigError("need at least one encoder and one decoder layer")
        if self.audio_vocab < 4 or self.text_vocab < 4:
            raise ConfigError("vocabularies must reserve ids for PAD/BOS/EOS/UNK")
        if self.ffw_dim < 1 or self.max_audio_len < 1 or self.max_text_len < 1:
            raise ConfigError("dimensions must be positive")
        if self.score_loss_weight < 0:
            raise ConfigError("score_loss_weight must be >= 0")


def sinusoid_table(max_len: int, d: int) -> np.ndarray:
    """Fixed sin/cos position table, shape (max_len, d)."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _attn_param_names(prefix: str) -> list[tuple[str, str]]:
    return [(f"{prefix}.{w}", w) for w in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")]


class Model:
    """Holds the config, a flat name -> Tensor parameter dict, and the
    fixed position table. Parameters are float64 and autodiff leaves."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.pos = sinusoid_table(max(config.max_audio_len, config.max_text_len), config.d_model)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def set_trainable(self, names: Sequence[str] | None = None) -> None:
        """Mark the named parameters trainable and freeze the rest;
        None marks everything trainable."""
        allowed = None if names is None else set(names)
        for name, p in self.params.items():
            p.requires_grad = allowed is None or name in allowed


INIT_STD = 0.02  # every learned matrix starts ~ N(0, INIT_STD^2)


def init_model(config: ModelConfig, rng: Rng) -> Model:
    """All matrices, embeddings and the dummy vector ~ N(0, 0.02^2);
    biases zero; layer-norm gain 1, offset 0. Deterministic per seed."""
    d, ff = config.d_model, config.ffw_dim
    params: dict[str, Tensor] = {}

    def mat(name, shape):
        params[name] = Tensor(rng.normal_array(shape, std=INIT_STD), requires_grad=True)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ln(prefix):
        params[f"{prefix}.g"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{prefix}.b"] = Tensor(np.zeros(d), requires_grad=True)

    def attn_block(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            mat(f"{prefix}.{w}", (d, d))
        for b in ("bq", "bk", "bv", "bo"):
            zeros(f"{prefix}.{b}", (d,))

    def ffw_block(prefix):
        mat(f"{prefix}.w1", (d, ff))
        zeros(f"{prefix}.b1", (ff,))
        mat(f"{prefix}.w2", (ff, d))
        zeros(f"{prefix}.b2", (d,))

    def encoder_layer(prefix):
        attn_block(f"{prefix}.self")
        ln(f"{prefix}.ln1")
        ffw_block(f"{prefix}.ffw")
        ln(f"{prefix}.ln2")

    mat("audio_embed", (config.audio_vocab, d))
    mat("text_embed", (config.text_vocab, d))
    for i in range(config.encoder_layers):
        encoder_layer(f"enc.l{i}")
    encoder_layer("ctx.enc")
    mat("ctx.dummy", (d,))
    for i in range(config.decoder_layers):
        p = f"dec.l{i}"
        attn_block(f"{p}.self")
        ln(f"{p}.ln1")
        attn_block(f"{p}.cross")
        ln(f"{p}.ln2")
        # context-attention: score projections + single-head value attention,
        # deliberately bias-free with no output projection and no norm
        for w in ("score_wq", "score_wk", "wq", "wk", "wv"):
            mat(f"{p}.ctx.{w}", (d, d))
        ffw_block(f"{p}.ffw")
        ln(f"{p}.ln3")
    mat("out.w", (d, config.text_vocab))
    zeros("out.b", (config.text_vocab,))
    return Model(config, params)


# -- building blocks --------------------------------------------------------


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, hd = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * hd))


def _mha(params, prefix: str, q_in: Tensor, kv_in: Tensor, mask, n_heads: int) -> Tensor:
    """Multi-head attention; mask is a bool array broadcastable to
    (B, H, Tq, Tk), True = blocked."""
    q = _split_heads(T.add(T.matmul(q_in, params[f"{prefix}.wq"]), params[f"{prefix}.bq"]), n_heads)
    k = _split_heads(T.add(T.matmul(kv_in, params[f"{prefix}.wk"]), params[f"{prefix}.bk"]), n_heads)
    v = _split_heads(T.add(T.matmul(kv_in, params[f"{prefix}.wv"]), params[f"{prefix}.bv"]), n_heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), T.Tensor(scale))
    if mask is not None:
        scores = T.masked_fill(scores, mask, -1e30)
    out = _merge_heads(T.matmul(T.softmax(scores), v))
    return T.add(T.matmul(out, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _sublayer(params, ln_prefix: str, x: Tensor, sub: Tensor) -> Tensor:
    return T.layer_norm(T.add(x, sub), params[f"{ln_prefix}.g"], params[f"{ln_prefix}.b"])


def _encoder_layer(params, prefix: str, x: Tensor, mask, n_heads: int) -> Tensor:
    x = _sublayer(params, f"{prefix}.ln1", x, _mha(params, f"{prefix}.self", x, x, mask, n_heads))
    return _sublayer(params, f"{prefix}.ln2", x, _ffw(params, f"{prefix}.ffw", x))


def _ffw(params, prefix: str, x: Tensor) -> Tensor:
    h = T.relu(T.add(T.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return T.add(T.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _embed(model: Model, table: str, ids: np.ndarray) -> Tensor:
    """Scaled embedding plus sinusoidal positions (ids shape (B, T))."""
    d = model.config.d_model
    x = T.mul(T.embedding(model.params[table], ids), Tensor(math.sqrt(d)))
    return T.add(x, Tensor(model.pos[: ids.shape[-1]]))


# -- audio encoder -----------------------------------------------------------


def encode_audio_batch(model: Model, audio: np.ndarray, pad_mask: np.ndarray | None) -> Tensor:
    """Encoder stack over (B, Tx) audio ids; pad_mask True marks padding."""
    if audio.shape[-1] == 0:
        raise ContractError("audio input is empty")
    if audio.shape[-1] > model.config.max_audio_len:
        raise ContractError(f"audio length {audio.shape[-1]} exceeds max {model.config.max_audio_len}")
    x = _embed(model, "audio_embed", audio)
    mask = None if pad_mask is None else pad_mask[:, None, None, :]
    for i in range(model.config.encoder_layers):
        x = _encoder_layer(model.params, f"enc.l{i}", x, mask, model.config.n_heads)
    return x


def encode_audio(model: Model, audio_tokens: Sequence[int]) -> Tensor:
    """Single-sequence encoder output, shape (Tx, d_model)."""
    ids = np.asarray(list(audio_tokens), dtype=np.int64)[None, :]
    return T.reshape(encode_audio_batch(model, ids, None), (ids.shape[1], model.config.d_model))


# -- context encoding ---------------------------------------------------------


@dataclass
class ContextEncoding:
    """Bias list encoded against a model: detection summaries plus the
    output-surface value materials for the second attention step."""
    entries: ContextBiasingList
    summaries: Tensor  # (L+1, d); row 0 is the learned dummy
    value_embeds: tuple[Tensor, ...]  # per entry: raw output-token embeddings (len, d)
    output_tokens: tuple[tuple[int, ...], ...]  # per entry: output surface token ids

    def __len__(self) -> int:
        return len(self.entries)


def encode_context(model: Model, blist: ContextBiasingList) -> ContextEncoding:
    """Each entry is encoded independently: one context-encoder layer over
    the detect surface's embedded tokens, mean-pooled into the summary.
    Value embeddings come from the output surface and are raw lookups.

    The detect embedding scales the position table down to the
    embedding-init magnitude: at full scale the mean pool is dominated
    by a shared length-signature direction, which collapses the
    summaries together and starves the relevance scores of content
    signal, while dropping positions entirely would give anagrams
    identical summaries."""
    d = model.config.d_model
    rows = [T.reshape(model.params["ctx.dummy"], (1, d))]
    value_embeds = []
    output_tokens = []
    embed_scale = Tensor(math.sqrt(d))
    pos_scale = INIT_STD * math.sqrt(d)
    for e in blist:
        detect_ids = tokenize(e.detect)
        output_ids = tokenize(e.output)
        if not detect_ids or not output_ids:
            raise ValueError(f"bias entry {e.output!r} tokenizes to length 0")
        if len(detect_ids) > model.config.max_text_len or len(output_ids) > model.config.max_text_len:
            raise ContractError(f"bias entry {e.output!r} exceeds max text length")
        x = T.mul(T.embedding(model.params["text_embed"],
                              np.asarray(detect_ids, dtype=np.int64)[None, :]), embed_scale)
        x = T.add(x, Tensor(model.pos[: len(detect_ids)] * pos_scale))
        enc = _encoder_layer(model.params, "ctx.enc", x, None, model.config.n_heads)
        rows.append(T.mean(enc, axis=1))
        value_embeds.append(T.embedding(model.params["text_embed"],
                                        np.asarray(output_ids, dtype=np.int64)))
        output_tokens.append(tuple(output_ids))
    return ContextEncoding(entries=blist, summaries=T.concat(rows, axis=0),
                           value_embeds=tuple(value_embeds), output_tokens=tuple(output_tokens))


# -- context attention ---------------------------------------------------------


def _ctx_scores(model: Model, layer: int, x_flat: Tensor, ctx: ContextEncoding) -> Tensor:
    """Raw relevance scores, shape (rows, L+1)."""
    p = model.params
    q = T.matmul(x_flat, p[f"dec.l{layer}.ctx.score_wq"])
    k = T.matmul(ctx.summaries, p[f"dec.l{layer}.ctx.score_wk"])
    scale = 1.0 / math.sqrt(model.config.d_model)
    return T.mul(T.matmul(q, T.transpose(k, (1, 0))), Tensor(scale))


def _ctx_apply(model: Model, layer: int, x_flat: Tensor, winners: np.ndarray,
               ctx: ContextEncoding) -> Tensor:
    """Add single-head attention over the winning entry's value embeddings
    to each row whose winner is > 0. Rows with winner 0 pass through."""
    p = model.params
    out = x_flat
    scale = 1.0 / math.sqrt(model.config.d_model)
    for n in np.unique(winners):
        if n == 0:
            continue
        idx = np.flatnonzero(winners == n)
        emb = ctx.value_embeds[n - 1]
        q = T.matmul(T.take_rows(x_flat, idx), p[f"dec.l{layer}.ctx.wq"])
        k = T.matmul(emb, p[f"dec.l{layer}.ctx.wk"])
        v = T.matmul(emb, p[f"dec.l{layer}.ctx.wv"])
        attn = T.softmax(T.mul(T.matmul(q, T.transpose(k, (1, 0))), Tensor(scale)))
        out = T.index_add(out, idx, T.matmul(attn, v))
    return out


def context_attention(model: Model, layer: int, inputs: Tensor,
                      ctx: ContextEncoding) -> tuple[Tensor, Tensor, int]:
    """Single-position form: inputs is a (d_model,) vector. Returns the
    sublayer output, the raw scores over L+1 summaries, and the winner."""
    x = T.reshape(inputs, (1, model.config.d_model))
    scores = _ctx_scores(model, layer, x, ctx)
    winner = int(np.argmax(scores.data[0]))
    if winner == 0:
        out = inputs
    else:
        out = T.reshape(_ctx_apply(model, layer, x, np.array([winner]), ctx),
                        (model.config.d_model,))
    return out, T.reshape(scores, (len(ctx.entries) + 1,)), winner


# -- decoder ------------------------------------------------------------------


@dataclass
class StepOutput:
    logits: np.ndarray  # (text_vocab,) next-token logits
    winners: tuple[int, ...]  # per decoder layer, argmax summary index
    scores: np.ndarray  # (decoder_layers, L+1) raw relevance scores


def _decoder_hidden(model: Model, memory: Tensor, memory_mask, input_ids: np.ndarray,
                    ctx: ContextEncoding | None):
    """Decoder stack over (B, Ty) input ids. Returns hidden states (B, Ty, d),
    score tensors per layer (or None), winners (B, Ty, M) (or None)."""
    cfg = model.config
    b, ty = input_ids.shape
    if ty > cfg.max_text_len:
        raise ContractError(f"text length {ty} exceeds max {cfg.max_text_len}")
    x = _embed(model, "text_embed", input_ids)
    causal = np.triu(np.ones((ty, ty), dtype=bool), k=1)[None, None]
    score_layers = []
    winner_layers = []
    for i in range(cfg.decoder_layers):
        prefix = f"dec.l{i}"
        x = _sublayer(model.params, f"{prefix}.ln1",
                      x, _mha(model.params, f"{prefix}.self", x, x, causal, cfg.n_heads))
        x = _sublayer(model.params, f"{prefix}.ln2",
                      x, _mha(model.params, f"{prefix}.cross", x, memory, memory_mask, cfg.n_heads))
        if ctx is not None:
            flat = T.reshape(x, (b * ty, cfg.d_model))
            scores = _ctx_scores(model, i, flat, ctx)
            winners = np.argmax(scores.data, axis=-1)
            flat = _ctx_apply(model, i, flat, winners, ctx)
            x = T.reshape(flat, (b, ty, cfg.d_model))
            score_layers.append(T.reshape(scores, (b, ty, 1, len(ctx.entries) + 1)))
            winner_layers.append(winners.reshape(b, ty, 1))
        x = _sublayer(model.params, f"{prefix}.ln3", x, _ffw(model.params, f"{prefix}.ffw", x))
    if ctx is None:
        return x, None, None
    return x, T.concat(score_layers, axis=2), np.concatenate(winner_layers, axis=2)


def _logits(model: Model, hidden: Tensor) -> Tensor:
    return T.add(T.matmul(hidden, model.params["out.w"]), model.params["out.b"])


def decode_step(model: Model, memory: Tensor, ctx: ContextEncoding | None,
                prefix: Sequence[int]) -> StepOutput:
    """Next-token logits after the given prefix (reference path, no cache).

    memory is a single-sequence encoding (Tx, d). The prefix must start
    with BOS. Winners/scores are reported for the last position.
    """
    prefix = list(prefix)
    if not prefix or prefix[0] != BOS_ID:
        raise ContractError("decoder prefix must start with BOS")
    cfg = model.config
    ids = np.asarray(prefix, dtype=np.int64)[None, :]
    mem = T.reshape(memory, (1,) + memory.shape)
    hidden, scores, winners = _decoder_hidden(model, mem, None, ids, ctx)
    logits = _logits(model, hidden)
    m = cfg.decoder_layers
    if ctx is None:
        return StepOutput(logits=logits.data[0, -1].copy(), winners=(0,) * m,
                          scores=np.zeros((m, 1)))
    return StepOutput(logits=logits.data[0, -1].copy(),
                      winners=tuple(int(w) for w in winners[0, -1]),
                      scores=scores.data[0, -1].copy())


def forward_teacher_forced(model: Model, audio_tokens: Sequence[int],
                           ctx: ContextEncoding | None, target: Sequence[int]):
    """Parallel causal evaluation of one sequence. Returns logits (T, V)
    and per-position scores (T, M, L+1), Tensors suitable for the loss;
    scores is None when ctx is None."""
    target = list(target)
    if not target or target[-1] != EOS_ID:
        raise ContractError("target must end with EOS")
    memory = encode_audio(model, audio_tokens)
    input_ids = np.asarray([BOS_ID] + target[:-1], dtype=np.int64)[None, :]
    mem = T.reshape(memory, (1,) + memory.shape)
    hidden, scores, winners = _decoder_hidden(model, mem, None, input_ids, ctx)
    logits = _logits(model, hidden)
    t = input_ids.shape[1]
    logits = T.reshape(logits, (t, model.config.text_vocab))
    if ctx is None:
        return logits, None, None
    l1 = len(ctx.entries) + 1
    return (logits,
            T.reshape(scores, (t, model.config.decoder_layers, l1)),
            winners[0])


def forward_batch(model: Model, audio: np.ndarray, audio_pad: np.ndarray,
                  input_ids: np.ndarray, ctx: ContextEncoding | None):
    """Batched training forward. audio (B, Tx) right-padded with audio_pad
    True at pad positions; input_ids (B, Ty) is BOS + shifted targets.
    Returns logits (B, Ty, V), scores (B, Ty, M, L+1) | None, winners | None."""
    memory = encode_audio_batch(model, audio, audio_pad)
    memory_mask = audio_pad[:, None, None, :]
    hidden, scores, winners = _decoder_hidden(model, memory, memory_mask, input_ids, ctx)
    return _logits(model, hidden), scores, winners
