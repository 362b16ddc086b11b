"""Two-phase training, the two-term loss, and binary checkpoints.

Phase A trains the plain encoder-decoder on audio-to-text with no bias
list in the loop. Phase B freezes everything from Phase A and trains
only the bias-specific parameters (context encoder, score and value
projections, dummy vector) on lists sampled from each batch's own
reference texts, supervised by ground-truth per-position entry indices.

Sampled entries may have their audio spans corrupted with confusable
phone substitutions, so the detector learns to fire on the distorted
audio renderings it will face for genuinely unseen words, while the
value path learns to emit the entry's clean spelling.

The loss is per-sequence token cross-entropy plus a weighted
score-classification cross-entropy averaged over decoder layers, both
normalized by the sequence's non-pad length, then averaged over the
batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .biasing import BOS_ID, EOS_ID, PAD_ID, ContextBiasingList, build_list, make_entry, tokenize
from .errors import CheckpointError, ConfigError, ContractError, NonFiniteError
from .model import Model, ModelConfig, encode_context, forward_batch, init_model
from .optim import Adam
from .rng import Rng, derive_seed
from .synthdata import (
    AUDIO_PAD_ID,
    CONFUSABLE,
    ID_TO_PHONE,
    PHONE_TO_ID,
    Lexicon,
    Utterance,
    assemble_spans,
    audio_rng,
    noisy_word_spans,
)
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 3e-4
    warmup_steps: int = 100  # linear warmup, separately per phase
    phase_a_steps: int = 4000
    phase_b_steps: int = 1500
    p_keep: float = 0.5  # per-word chance of starting a sampled bias span
    max_entries: int = 8  # cap on sampled spans per batch
    phrase_lens: tuple[int, ...] = (1, 2)
    corrupt_prob: float = 0.5  # chance a sampled span's audio is corrupted
    corrupt_sub_prob: float = 0.5  # per-phone confusable substitution rate
    val_size: int = 128  # utterances held out from the end of the train split
    log_every: int = 200

    def __post_init__(self):
        if self.batch_size < 1 or self.phase_a_steps < 0 or self.phase_b_steps < 0:
            raise ConfigError("batch size and step counts must be positive")
        if not 0 <= self.p_keep <= 1 or not 0 <= self.corrupt_prob <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")
        if not 0 <= self.corrupt_sub_prob <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")
        if self.max_entries < 1 or not self.phrase_lens:
            raise ConfigError("need at least one sampled entry and phrase length")
        if min(self.phrase_lens) < 1:
            raise ConfigError("phrase lengths must be >= 1")
        if self.lr <= 0 or self.warmup_steps < 0 or self.val_size < 0:
            raise ConfigError("lr must be positive, warmup and val_size non-negative")


# -- bias sampling and ground truth -------------------------------------------


def sample_bias_spans(
    texts: list[str], rng: Rng, p_keep: float = 0.5, max_entries: int = 8,
    phrase_lens: tuple[int, ...] = (1, 2),
) -> tuple[ContextBiasingList, tuple[tuple[int, int, int, int], ...]]:
    """Sample non-overlapping word spans from the batch's reference texts.

    Scans each text left to right; each word starts a span with
    probability p_keep, with a length drawn from phrase_lens (clipped to
    the text's end). Sampling stops at max_entries spans. Returns the
    deduplicated list and the picks as (text index, start word, word
    count, 1-based entry index).
    """
    raw: list[tuple[int, int, int, str]] = []
    for b, text in enumerate(texts):
        if len(raw) >= max_entries:
            break
        words = text.split()
        i = 0
        while i < len(words) and len(raw) < max_entries:
            if rng.uniform() < p_keep:
                n = min(phrase_lens[rng.randint(len(phrase_lens))], len(words) - i)
                raw.append((b, i, n, " ".join(words[i : i + n])))
                i += n
            else:
                i += 1
    entries = build_list([make_entry(phrase) for (_, _, _, phrase) in raw])
    index = {e.key(): l for l, e in enumerate(entries, start=1)}
    picks = tuple((b, i, n, index[make_entry(phrase).key()]) for b, i, n, phrase in raw)
    return entries, picks


def mark_ground_truth(texts: list[str], blist: ContextBiasingList, ty: int) -> np.ndarray:
    """Per-position entry indices (B, ty) over the target token layout.

    Every whole-word occurrence of an entry's output surface is marked
    with the entry's 1-based index on the characters it covers
    (including a two-word phrase's inner space); earlier entries win
    overlaps; EOS and padding stay 0.
    """
    g = np.zeros((len(texts), ty), dtype=np.int64)
    for b, text in enumerate(texts):
        words = text.split()
        starts = []
        pos = 0
        for w in words:
            starts.append(pos)
            pos += len(w) + 1
        for l, entry in enumerate(blist, start=1):
            phrase = entry.output.split()
            k = len(phrase)
            for i in range(0, len(words) - k + 1):
                if words[i : i + k] != phrase:
                    continue
                c0 = starts[i]
                c1 = c0 + len(entry.output)
                for t in range(c0, min(c1, ty)):
                    if g[b, t] == 0:
                        g[b, t] = l
    return g


# -- loss ----------------------------------------------------------------------


def compute_loss(logits: Tensor, scores: Tensor | None, targets: np.ndarray,
                 g: np.ndarray | None, score_weight: float = 1.0):
    """Two-term objective; returns (scalar loss Tensor, float parts dict).

    Token term: per-sequence mean cross-entropy of logits (B, Ty, V)
    against targets, padding excluded. Score term: per-sequence
    cross-entropy of scores (B, Ty, M, L+1) against g averaged over the
    M decoder layers and non-pad positions, weighted by score_weight.
    Both terms are means over the batch.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"logits {logits.shape} do not match targets {targets.shape}")
    mask = targets != PAD_ID
    counts = mask.sum(axis=-1)
    if (counts == 0).any():
        raise ContractError("a sequence has no non-pad target tokens")
    batch = targets.shape[0]
    token_w = mask / counts[:, None] / batch
    token_ce = T.cross_entropy(logits, np.where(mask, targets, 0))
    token_term = T.sum_(T.mul(token_ce, Tensor(token_w)))
    if scores is None:
        return token_term, {"token": float(token_term.data), "score": 0.0}

    g = np.asarray(g, dtype=np.int64)
    if g.shape != targets.shape:
        raise ContractError(f"ground truth {g.shape} does not match targets {targets.shape}")
    if scores.shape[:2] != targets.shape:
        raise ContractError(f"scores {scores.shape} do not match targets {targets.shape}")
    if g.min() < 0 or g.max() >= scores.shape[-1]:
        raise ContractError(f"ground-truth indices outside [0, {scores.shape[-1]})")
    m = scores.shape[2]
    g_layers = np.broadcast_to(np.where(mask, g, 0)[:, :, None], g.shape + (m,))
    score_ce = T.cross_entropy(scores, g_layers)
    score_term = T.sum_(T.mul(score_ce, Tensor(token_w[:, :, None] / m)))
    loss = T.add(token_term, T.mul(score_term, Tensor(float(score_weight))))
    return loss, {"token": float(token_term.data), "score": float(score_term.data)}


# -- batches -------------------------------------------------------------------


@dataclass
class TrainBatch:
    audio: np.ndarray  # (B, Tx) phone ids, right-padded
    audio_pad: np.ndarray  # (B, Tx) bool, True at padding
    input_ids: np.ndarray  # (B, Ty) BOS + shifted targets
    targets: np.ndarray  # (B, Ty) text tokens + EOS, PAD-padded
    blist: ContextBiasingList
    g: np.ndarray  # (B, Ty) ground-truth entry indices
    picks: tuple  # sampled spans (text idx, start word, word count, entry idx)


def _corrupt_span(span: list[int], rng: Rng, sub_prob: float) -> list[int]:
    out = []
    for phone_id in span:
        if rng.uniform() < sub_prob:
            phone_id = PHONE_TO_ID[CONFUSABLE[ID_TO_PHONE[phone_id]]]
        out.append(phone_id)
    return out


def build_batch(utts: list[Utterance], rng: Rng, config: TrainConfig,
                lexicon: Lexicon | None = None, seed: int | None = None,
                with_bias: bool = True) -> TrainBatch:
    """Assemble one padded batch; with_bias samples a list, marks ground
    truth, and corrupts sampled spans' audio (needs lexicon and the
    corpus seed to re-derive per-word spans)."""
    texts = [u.text for u in utts]
    token_seqs = [tokenize(t) + [EOS_ID] for t in texts]
    ty = max(len(s) for s in token_seqs)

    if with_bias:
        blist, picks = sample_bias_spans(texts, rng, config.p_keep,
                                         config.max_entries, config.phrase_lens)
        g = mark_ground_truth(texts, blist, ty)
    else:
        blist, picks, g = build_list([]), (), np.zeros((len(utts), ty), dtype=np.int64)

    audio_seqs = [list(u.audio) for u in utts]
    if picks and config.corrupt_prob > 0:
        if lexicon is None or seed is None:
            raise ContractError("span corruption needs the lexicon and corpus seed")
        span_cache: dict[int, list[list[int]]] = {}
        for b, start, n_words, _ in picks:
            if rng.uniform() >= config.corrupt_prob:
                continue
            if b not in span_cache:
                span_cache[b] = noisy_word_spans(
                    lexicon, texts[b].split(), audio_rng(seed, utts[b].id))
            spans = span_cache[b]
            for k in range(start, start + n_words):
                spans[k] = _corrupt_span(spans[k], rng, config.corrupt_sub_prob)
        for b, spans in span_cache.items():
            audio_seqs[b] = list(assemble_spans(spans))

    tx = max(len(a) for a in audio_seqs)
    batch = len(utts)
    audio = np.full((batch, tx), AUDIO_PAD_ID, dtype=np.int64)
    audio_pad = np.ones((batch, tx), dtype=bool)
    input_ids = np.full((batch, ty), PAD_ID, dtype=np.int64)
    targets = np.full((batch, ty), PAD_ID, dtype=np.int64)
    for i, (a, toks) in enumerate(zip(audio_seqs, token_seqs)):
        audio[i, : len(a)] = a
        audio_pad[i, : len(a)] = False
        targets[i, : len(toks)] = toks
        input_ids[i, : len(toks)] = [BOS_ID] + toks[:-1]
    return TrainBatch(audio, audio_pad, input_ids, targets, blist, g, picks)


def _length_buckets(utts: list[Utterance], batch_size: int) -> list[list[Utterance]]:
    ordered = sorted(utts, key=lambda u: (len(u.audio), len(u.text), u.id))
    return [ordered[i : i + batch_size] for i in range(0, len(ordered), batch_size)]


def _batch_stream(buckets: list[list[Utterance]], rng: Rng):
    while True:
        order = list(range(len(buckets)))
        rng.shuffle(order)
        for i in order:
            yield buckets[i]


# -- training ------------------------------------------------------------------


def context_param_names(model: Model) -> list[str]:
    """Parameters of the biasing machinery: the context encoder, the dummy
    vector, and every decoder layer's score/value projections."""
    return [n for n in model.params if n.startswith("ctx.") or ".ctx." in n]


@dataclass
class TrainResult:
    model: Model
    checkpoint: "Checkpoint"
    phase_a_losses: list[float]
    phase_b_losses: list[float]
    val_token_loss: float
    val_score_accuracy: float


def _warm_lr(base: float, step: int, warmup: int) -> float:
    if warmup <= 0:
        return base
    return base * min(1.0, (step + 1) / warmup)


def train(utterances: list[Utterance], lexicon: Lexicon,
          model_config: ModelConfig | None = None,
          config: TrainConfig | None = None, seed: int = 42) -> TrainResult:
    """Run both phases and return the model, checkpoint, and diagnostics."""
    model_config = model_config or ModelConfig()
    config = config or TrainConfig()
    if not utterances:
        raise ContractError("training corpus is empty")
    rng = Rng(derive_seed("train", seed))
    model = init_model(model_config, rng.spawn("init"))

    val_size = min(config.val_size, max(0, len(utterances) - config.batch_size))
    train_utts = utterances[: len(utterances) - val_size] if val_size else list(utterances)
    val_utts = utterances[len(utterances) - val_size :] if val_size else []
    buckets = _length_buckets(train_utts, config.batch_size)

    ctx_names = set(context_param_names(model))
    base_names = [n for n in model.params if n not in ctx_names]

    _, phase_a_losses = _run_phase(
        model, lexicon, buckets, base_names, config, seed,
        steps=config.phase_a_steps, rng=rng.spawn("phase-a"), with_bias=False,
        label="A")
    frozen = {n: model.params[n].data.copy() for n in base_names}

    opt_b, phase_b_losses = _run_phase(
        model, lexicon, buckets, sorted(ctx_names), config, seed,
        steps=config.phase_b_steps, rng=rng.spawn("phase-b"), with_bias=True,
        label="B")
    for n in base_names:
        if not np.array_equal(frozen[n], model.params[n].data):
            raise ContractError(f"frozen parameter {n} changed during the bias phase")

    val_token_loss, val_score_accuracy = _validate(
        model, val_utts or train_utts[-config.batch_size :], lexicon, config, seed,
        rng.spawn("val"))

    checkpoint = Checkpoint(
        config=model_config,
        params={n: p.data.copy() for n, p in model.params.items()},
        opt_state=opt_b.state_arrays(),
        step=config.phase_a_steps + config.phase_b_steps,
        rng_state=rng.get_state(),
    )
    return TrainResult(model, checkpoint, phase_a_losses, phase_b_losses,
                       val_token_loss, val_score_accuracy)


def _run_phase(model, lexicon, buckets, trainable, config, seed, steps, rng,
               with_bias, label):
    model.set_trainable(trainable)
    optimizer = Adam({n: model.params[n] for n in trainable}, lr=config.lr)
    stream = _batch_stream(buckets, rng.spawn("order"))
    losses = []
    for step in range(steps):
        utts = next(stream)
        batch = build_batch(utts, rng, config, lexicon=lexicon, seed=seed,
                            with_bias=with_bias)
        ctx = encode_context(model, batch.blist) if with_bias else None
        try:
            logits, scores, _ = forward_batch(model, batch.audio, batch.audio_pad,
                                              batch.input_ids, ctx)
            loss, _ = compute_loss(logits, scores, batch.targets,
                                   batch.g if with_bias else None,
                                   model.config.score_loss_weight)
            T.backward(loss)
        except NonFiniteError as e:
            raise NonFiniteError(f"phase {label} step {step}: {e}") from e
        for name in trainable:
            # A step where no sampled entry wins anywhere leaves the value
            # projections out of the graph; their update is zero, not an error.
            p = model.params[name]
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        optimizer.step(lr=_warm_lr(config.lr, step, config.warmup_steps))
        losses.append(float(loss.data))
    return optimizer, losses


def _validate(model, utts, lexicon, config, seed, rng):
    """Held-out token loss (no bias list) and score-classification accuracy
    (argmax of the relevance scores vs the ground-truth indices)."""
    token_losses = []
    correct = 0
    total = 0
    with T.no_grad():
        for i in range(0, len(utts), config.batch_size):
            chunk = utts[i : i + config.batch_size]
            plain = build_batch(chunk, rng, config, with_bias=False)
            logits, _, _ = forward_batch(model, plain.audio, plain.audio_pad,
                                         plain.input_ids, None)
            loss, _ = compute_loss(logits, None, plain.targets, None)
            token_losses.append(float(loss.data))

            biased = build_batch(chunk, rng, config, lexicon=lexicon, seed=seed,
                                 with_bias=True)
            ctx = encode_context(model, biased.blist)
            _, scores, _ = forward_batch(model, biased.audio, biased.audio_pad,
                                         biased.input_ids, ctx)
            if scores is not None:
                mask = biased.targets != PAD_ID
                predicted = np.argmax(scores.data, axis=-1)
                want = biased.g[:, :, None]
                correct += int((predicted == want)[mask].sum())
                total += int(mask.sum()) * predicted.shape[-1]
    accuracy = correct / total if total else 0.0
    return float(np.mean(token_losses)), accuracy


# -- checkpoints ---------------------------------------------------------------


CHECKPOINT_MAGIC = b"CBNW"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    opt_state: dict[str, np.ndarray]
    step: int
    rng_state: tuple[int, int, int, int]
    version: int = CHECKPOINT_VERSION


def _pack_section(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        # asarray, not ascontiguousarray: the latter promotes scalars to rank 1
        arr = np.asarray(arrays[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    return b"".join(parts)


def _meta_arrays(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    meta = {f"config.{f.name}": np.asarray(float(getattr(ckpt.config, f.name)))
            for f in fields(ModelConfig)}
    meta["step"] = np.asarray(float(ckpt.step))
    meta["rng_state"] = np.asarray(
        [[w >> 32, w & 0xFFFFFFFF] for w in ckpt.rng_state], dtype=np.float64)
    return meta


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: magic, u32 version, then three sections (parameters,
    optimizer state, metadata), each a u32 entry count followed by entries
    of u16 name length, name, u8 rank, u64 dims, float64 payload. All
    integers little-endian; entries sorted by name; byte-reproducible."""
    blob = b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<I", ckpt.version),
        _pack_section(ckpt.params),
        _pack_section(ckpt.opt_state),
        _pack_section(_meta_arrays(ckpt)),
    ])
    with open(path, "wb") as f:
        f.write(blob)


def _read(buf: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(buf):
        raise CheckpointError(f"truncated checkpoint: {what} at byte {offset}")
    return buf[offset : offset + size], offset + size


def _parse_section(buf: bytes, offset: int) -> tuple[dict[str, np.ndarray], int]:
    raw, offset = _read(buf, offset, 4, "section entry count")
    (count,) = struct.unpack("<I", raw)
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, offset = _read(buf, offset, 2, "entry name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, offset = _read(buf, offset, name_len, "entry name")
        name = raw.decode("utf-8")
        raw, offset = _read(buf, offset, 1, f"rank of {name}")
        rank = raw[0]
        raw, offset = _read(buf, offset, 8 * rank, f"dims of {name}")
        shape = tuple(int(d) for d in struct.unpack(f"<{rank}Q", raw)) if rank else ()
        size = 1
        for d in shape:
            size *= d
        raw, offset = _read(buf, offset, 8 * size, f"payload of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return arrays, offset


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        buf = f.read()
    raw, offset = _read(buf, 0, 4, "magic")
    if raw != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {raw!r} at byte 0")
    raw, offset = _read(buf, offset, 4, "version")
    (version,) = struct.unpack("<I", raw)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at byte 4")
    params, offset = _parse_section(buf, offset)
    opt_state, offset = _parse_section(buf, offset)
    meta, offset = _parse_section(buf, offset)
    if offset != len(buf):
        raise CheckpointError(f"{len(buf) - offset} trailing bytes at byte {offset}")
    try:
        kwargs = {}
        for f in fields(ModelConfig):
            value = float(meta[f"config.{f.name}"])
            kwargs[f.name] = value if f.name == "score_loss_weight" else int(value)
        config = ModelConfig(**kwargs)
        step = int(float(meta["step"]))
        rng_state = tuple(int(hi) << 32 | int(lo) for hi, lo in meta["rng_state"])
    except KeyError as e:
        raise CheckpointError(f"metadata entry {e.args[0]!r} missing") from e
    return Checkpoint(config=config, params=params, opt_state=opt_state,
                      step=step, rng_state=rng_state, version=version)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    params = {n: Tensor(arr.copy(), requires_grad=True)
              for n, arr in ckpt.params.items()}
    return Model(ckpt.config, params)
