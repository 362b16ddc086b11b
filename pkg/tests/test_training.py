"""Tests for bias-span sampling, ground-truth marking, the two-term loss,
batch assembly with span corruption, the two-phase loop, and checkpoints."""

import os
import re
import struct

import numpy as np
import pytest

import ctxbias.synthdata as S
import ctxbias.tensor as T
import ctxbias.training as TR
from ctxbias.biasing import BOS_ID, EOS_ID, PAD_ID, build_list, make_entry, tokenize
from ctxbias.errors import CheckpointError, ConfigError, ContractError, NonFiniteError
from ctxbias.model import ModelConfig, forward_batch, init_model
from ctxbias.rng import Rng, derive_seed
from ctxbias.tensor import Tensor

TINY = ModelConfig(d_model=16, n_heads=2, encoder_layers=1, decoder_layers=2,
                   ffw_dim=24, max_audio_len=96, max_text_len=80)


@pytest.fixture(scope="module")
def corpus():
    lex = S.gen_lexicon(n_regular=40, rule_counts={"c_k": 2, "s_z": 2}, seed=7)
    train, test = S.gen_corpus(lex, n_train=24, n_test=8, seed=7)
    return lex, train, test


def ref_log_softmax(x):
    shifted = x - np.max(x)
    return shifted - np.log(np.exp(shifted).sum())


def ref_loss(logits, scores, targets, g, weight):
    """Direct summation: per-sequence mean cross-entropy over non-pad
    positions, score term averaged over layers, then batch mean."""
    total = 0.0
    batch, ty = targets.shape
    for b in range(batch):
        t_b = int((targets[b] != PAD_ID).sum())
        tok = 0.0
        for t in range(ty):
            if targets[b, t] == PAD_ID:
                continue
            tok += -ref_log_softmax(logits[b, t])[targets[b, t]]
        seq = tok / t_b
        if scores is not None:
            m = scores.shape[2]
            sc = 0.0
            for t in range(ty):
                if targets[b, t] == PAD_ID:
                    continue
                for layer in range(m):
                    sc += -ref_log_softmax(scores[b, t, layer])[g[b, t]]
            seq += weight * sc / (m * t_b)
        total += seq
    return total / batch


def random_loss_inputs(rng, batch=3, ty=7, vocab=11, layers=2, n_entries=3):
    logits = rng.standard_normal((batch, ty, vocab))
    scores = rng.standard_normal((batch, ty, layers, n_entries + 1))
    targets = rng.integers(1, vocab, size=(batch, ty))
    for b in range(batch):
        pad_from = rng.integers(2, ty + 1)
        targets[b, pad_from:] = PAD_ID
    g = rng.integers(0, n_entries + 1, size=(batch, ty))
    return logits, scores, targets, g


class TestComputeLoss:
    def test_uniform_logits_closed_form(self):
        # all-zero logits make every class equally likely
        targets = np.array([[5, 6, 0], [7, 0, 0]])
        logits = Tensor(np.zeros((2, 3, 33)))
        loss, parts = TR.compute_loss(logits, None, targets, None)
        np.testing.assert_allclose(float(loss.data), np.log(33.0), rtol=1e-12)
        assert parts["score"] == 0.0

    def test_uniform_scores_closed_form(self):
        targets = np.array([[5, 6, 0], [7, 8, 9]])
        g = np.array([[1, 0, 0], [0, 2, 3]])
        logits = Tensor(np.zeros((2, 3, 33)))
        scores = Tensor(np.zeros((2, 3, 2, 4)))
        loss, parts = TR.compute_loss(logits, scores, targets, g, score_weight=0.7)
        expected = np.log(33.0) + 0.7 * np.log(4.0)
        np.testing.assert_allclose(float(loss.data), expected, rtol=1e-12)
        np.testing.assert_allclose(parts["token"], np.log(33.0), rtol=1e-12)
        np.testing.assert_allclose(parts["score"], np.log(4.0), rtol=1e-12)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            logits, scores, targets, g = random_loss_inputs(rng)
            weight = float(rng.uniform(0.1, 2.0))
            loss, _ = TR.compute_loss(Tensor(logits), Tensor(scores), targets, g,
                                      score_weight=weight)
            want = ref_loss(logits, scores, targets, g, weight)
            np.testing.assert_allclose(float(loss.data), want, rtol=1e-10)

    def test_zero_weight_equals_token_term(self):
        rng = np.random.default_rng(1)
        logits, scores, targets, g = random_loss_inputs(rng)
        with_scores, _ = TR.compute_loss(Tensor(logits), Tensor(scores), targets, g,
                                         score_weight=0.0)
        token_only, _ = TR.compute_loss(Tensor(logits), None, targets, None)
        np.testing.assert_allclose(float(with_scores.data), float(token_only.data),
                                   rtol=1e-12)

    def test_pad_positions_do_not_contribute(self):
        rng = np.random.default_rng(2)
        logits, scores, targets, g = random_loss_inputs(rng)
        base, _ = TR.compute_loss(Tensor(logits), Tensor(scores), targets, g)
        pad = targets == PAD_ID
        logits2 = logits.copy()
        logits2[pad] = rng.standard_normal((int(pad.sum()), logits.shape[-1])) * 9
        scores2 = scores.copy()
        scores2[pad] = rng.standard_normal(scores2[pad].shape) * 9
        g2 = g.copy()
        g2[pad] = 0
        changed, _ = TR.compute_loss(Tensor(logits2), Tensor(scores2), targets, g2)
        np.testing.assert_allclose(float(changed.data), float(base.data), rtol=1e-12)

    def test_batch_mean_of_per_sequence_losses(self):
        rng = np.random.default_rng(3)
        logits, scores, targets, g = random_loss_inputs(rng, batch=4)
        whole, _ = TR.compute_loss(Tensor(logits), Tensor(scores), targets, g)
        singles = [
            float(TR.compute_loss(Tensor(logits[b : b + 1]), Tensor(scores[b : b + 1]),
                                  targets[b : b + 1], g[b : b + 1])[0].data)
            for b in range(4)
        ]
        np.testing.assert_allclose(float(whole.data), np.mean(singles), rtol=1e-12)

    def test_weight_scales_score_gradient(self):
        rng = np.random.default_rng(4)
        logits, scores, targets, g = random_loss_inputs(rng)
        s0 = Tensor(scores, requires_grad=True)
        loss0, _ = TR.compute_loss(Tensor(logits), s0, targets, g, score_weight=0.0)
        T.backward(loss0)
        np.testing.assert_allclose(s0.grad, 0.0, atol=1e-15)
        s1 = Tensor(scores, requires_grad=True)
        loss1, _ = TR.compute_loss(Tensor(logits), s1, targets, g, score_weight=1.0)
        T.backward(loss1)
        assert np.abs(s1.grad).max() > 0

    def test_shape_mismatch_raises(self):
        logits = Tensor(np.zeros((2, 3, 5)))
        with pytest.raises(ContractError):
            TR.compute_loss(logits, None, np.zeros((2, 4), dtype=int), None)
        scores = Tensor(np.zeros((2, 3, 2, 4)))
        targets = np.array([[4, 0, 0], [4, 4, 0]])
        with pytest.raises(ContractError):
            TR.compute_loss(logits, scores, targets, np.zeros((2, 4), dtype=int))

    def test_ground_truth_out_of_range_raises(self):
        logits = Tensor(np.zeros((1, 2, 5)))
        scores = Tensor(np.zeros((1, 2, 1, 3)))
        targets = np.array([[4, 4]])
        with pytest.raises(ContractError):
            TR.compute_loss(logits, scores, targets, np.array([[0, 3]]))

    def test_all_pad_sequence_raises(self):
        logits = Tensor(np.zeros((1, 2, 5)))
        with pytest.raises(ContractError):
            TR.compute_loss(logits, None, np.zeros((1, 2), dtype=int), None)


class TestSampleBiasSpans:
    def test_deterministic(self):
        texts = ["alpha beta gamma", "delta epsilon"]
        a = TR.sample_bias_spans(texts, Rng(derive_seed("s", 1)))
        b = TR.sample_bias_spans(texts, Rng(derive_seed("s", 1)))
        assert a[1] == b[1]
        assert [e.key() for e in a[0]] == [e.key() for e in b[0]]

    def test_zero_keep_samples_nothing(self):
        blist, picks = TR.sample_bias_spans(["a b c"], Rng(1), p_keep=0.0)
        assert len(blist) == 0 and picks == ()

    def test_full_keep_single_words_covers_text(self):
        blist, picks = TR.sample_bias_spans(
            ["one two three"], Rng(1), p_keep=1.0, max_entries=16, phrase_lens=(1,))
        assert [(p[1], p[2]) for p in picks] == [(0, 1), (1, 1), (2, 1)]
        assert [e.output for e in blist] == ["one", "two", "three"]

    def test_max_entries_cap(self):
        blist, picks = TR.sample_bias_spans(
            ["a b c d e f g h"], Rng(1), p_keep=1.0, max_entries=3, phrase_lens=(1,))
        assert len(picks) == 3

    def test_duplicate_phrases_share_one_entry(self):
        blist, picks = TR.sample_bias_spans(
            ["echo echo echo"], Rng(1), p_keep=1.0, max_entries=8, phrase_lens=(1,))
        assert len(blist) == 1
        assert [p[3] for p in picks] == [1, 1, 1]

    def test_picks_are_nonoverlapping_and_match_text(self):
        rng = Rng(derive_seed("spans", 9))
        texts = ["aa bb cc dd ee", "ff gg hh ii", "jj kk"]
        for _ in range(50):
            blist, picks = TR.sample_bias_spans(texts, rng, phrase_lens=(1, 2, 3))
            covered = {b: set() for b in range(len(texts))}
            for b, start, n, idx in picks:
                words = texts[b].split()
                span = set(range(start, start + n))
                assert not (span & covered[b])
                covered[b] |= span
                assert blist[idx - 1].output == " ".join(words[start : start + n])

    def test_phrase_clipped_at_text_end(self):
        blist, picks = TR.sample_bias_spans(
            ["solo"], Rng(2), p_keep=1.0, max_entries=4, phrase_lens=(3,))
        assert picks == ((0, 0, 1, 1),)
        assert blist[0].output == "solo"


class TestMarkGroundTruth:
    def test_single_word_literal(self):
        # "the llarden fund": entry covers characters 4..10
        blist = build_list([make_entry("llarden")])
        g = TR.mark_ground_truth(["the llarden fund"], blist, 17)
        want = np.zeros((1, 17), dtype=np.int64)
        want[0, 4:11] = 1
        np.testing.assert_array_equal(g, want)

    def test_two_word_phrase_covers_inner_space(self):
        blist = build_list([make_entry("llarden fund")])
        g = TR.mark_ground_truth(["the llarden fund"], blist, 17)
        want = np.zeros((1, 17), dtype=np.int64)
        want[0, 4:16] = 1
        np.testing.assert_array_equal(g, want)

    def test_all_occurrences_in_every_text(self):
        blist = build_list([make_entry("fund")])
        g = TR.mark_ground_truth(["big fund", "fund the fund"], blist, 14)
        want = np.zeros((2, 14), dtype=np.int64)
        want[0, 4:8] = 1
        want[1, 0:4] = 1
        want[1, 9:13] = 1
        np.testing.assert_array_equal(g, want)

    def test_whole_words_only(self):
        blist = build_list([make_entry("fun")])
        g = TR.mark_ground_truth(["fund fun"], blist, 9)
        want = np.zeros((1, 9), dtype=np.int64)
        want[0, 5:8] = 1
        np.testing.assert_array_equal(g, want)

    def test_earlier_entry_wins_overlap(self):
        blist = build_list([make_entry("llarden fund"), make_entry("fund")])
        g = TR.mark_ground_truth(["the llarden fund"], blist, 17)
        assert set(g[0, 4:16]) == {1}
        g2 = TR.mark_ground_truth(["fund only"], blist, 10)
        assert set(g2[0, 0:4]) == {2}

    def test_eos_and_pad_stay_zero(self):
        blist = build_list([make_entry("ab")])
        g = TR.mark_ground_truth(["ab"], blist, 6)
        np.testing.assert_array_equal(g[0], [1, 1, 0, 0, 0, 0])

    def test_matches_regex_rederivation(self, corpus):
        # independent construction: regex whole-word spans, first entry wins
        _, train, _ = corpus
        rng = Rng(derive_seed("gt", 3))
        texts = [u.text for u in train[:6]]
        for _ in range(25):
            blist, _ = TR.sample_bias_spans(texts, rng, phrase_lens=(1, 2))
            if not len(blist):
                continue
            ty = max(len(t) for t in texts) + 1
            g = TR.mark_ground_truth(texts, blist, ty)
            want = np.zeros((len(texts), ty), dtype=np.int64)
            for b, text in enumerate(texts):
                for idx, entry in enumerate(blist, start=1):
                    pat = rf"(?<!\S){re.escape(entry.output)}(?!\S)"
                    for m in re.finditer(pat, text):
                        for t in range(m.start(), min(m.end(), ty)):
                            if want[b, t] == 0:
                                want[b, t] = idx
            np.testing.assert_array_equal(g, want)


class TestBuildBatch:
    def make_cfg(self, **kw):
        base = dict(batch_size=4, phase_a_steps=1, phase_b_steps=1, val_size=0)
        base.update(kw)
        return TR.TrainConfig(**base)

    def test_teacher_forcing_layout(self, corpus):
        lex, train, _ = corpus
        utts = train[:4]
        batch = TR.build_batch(utts, Rng(1), self.make_cfg(), with_bias=False)
        for i, u in enumerate(utts):
            toks = tokenize(u.text)
            n = len(toks) + 1
            np.testing.assert_array_equal(batch.targets[i, : n - 1], toks)
            assert batch.targets[i, n - 1] == EOS_ID
            assert batch.input_ids[i, 0] == BOS_ID
            np.testing.assert_array_equal(batch.input_ids[i, 1:n], toks)
            np.testing.assert_array_equal(batch.targets[i, n:], PAD_ID)
            np.testing.assert_array_equal(batch.input_ids[i, n:], PAD_ID)

    def test_audio_padding_mask(self, corpus):
        lex, train, _ = corpus
        utts = train[:4]
        batch = TR.build_batch(utts, Rng(1), self.make_cfg(), with_bias=False)
        for i, u in enumerate(utts):
            n = len(u.audio)
            np.testing.assert_array_equal(batch.audio[i, :n], u.audio)
            np.testing.assert_array_equal(batch.audio[i, n:], S.AUDIO_PAD_ID)
            assert not batch.audio_pad[i, :n].any()
            assert batch.audio_pad[i, n:].all()

    def test_without_bias_is_empty(self, corpus):
        _, train, _ = corpus
        batch = TR.build_batch(train[:3], Rng(1), self.make_cfg(), with_bias=False)
        assert len(batch.blist) == 0 and batch.picks == ()
        assert not batch.g.any()

    def test_no_corruption_keeps_stored_audio(self, corpus):
        lex, train, _ = corpus
        utts = train[:4]
        cfg = self.make_cfg(corrupt_prob=0.0, p_keep=1.0)
        batch = TR.build_batch(utts, Rng(1), cfg, lexicon=lex, seed=7, with_bias=True)
        assert len(batch.picks) > 0
        for i, u in enumerate(utts):
            np.testing.assert_array_equal(batch.audio[i, : len(u.audio)], u.audio)

    def test_corruption_substitutes_confusables_in_picked_spans(self, corpus):
        lex, train, _ = corpus
        utts = train[:4]
        cfg = self.make_cfg(corrupt_prob=1.0, corrupt_sub_prob=1.0, p_keep=1.0,
                            max_entries=64, phrase_lens=(1,))
        batch = TR.build_batch(utts, Rng(1), cfg, lexicon=lex, seed=7, with_bias=True)
        sep = S.PHONE_TO_ID[S.SEPARATOR]
        for i, u in enumerate(utts):
            clean = S.noisy_word_spans(lex, u.text.split(), S.audio_rng(7, u.id))
            row = [int(x) for x in batch.audio[i] if x != S.AUDIO_PAD_ID]
            spans, cur = [], []
            for x in row:
                if x == sep:
                    spans.append(cur)
                    cur = []
                else:
                    cur.append(x)
            spans.append(cur)
            assert len(spans) == len(clean)
            for got, src in zip(spans, clean):
                want = [S.PHONE_TO_ID[S.CONFUSABLE[S.ID_TO_PHONE[p]]] for p in src]
                assert got == want

    def test_corruption_deterministic(self, corpus):
        lex, train, _ = corpus
        cfg = self.make_cfg(corrupt_prob=0.7)
        a = TR.build_batch(train[:4], Rng(9), cfg, lexicon=lex, seed=7, with_bias=True)
        b = TR.build_batch(train[:4], Rng(9), cfg, lexicon=lex, seed=7, with_bias=True)
        np.testing.assert_array_equal(a.audio, b.audio)
        np.testing.assert_array_equal(a.g, b.g)
        assert a.picks == b.picks

    def test_corruption_without_lexicon_raises(self, corpus):
        _, train, _ = corpus
        cfg = self.make_cfg(corrupt_prob=1.0, p_keep=1.0)
        with pytest.raises(ContractError):
            TR.build_batch(train[:2], Rng(1), cfg, with_bias=True)


class TestBuckets:
    def test_buckets_partition_and_sort(self, corpus):
        _, train, _ = corpus
        buckets = TR._length_buckets(train, 4)
        flat = [u.id for b in buckets for u in b]
        assert sorted(flat) == sorted(u.id for u in train)
        keys = [(len(u.audio), len(u.text), u.id) for b in buckets for u in b]
        assert keys == sorted(keys)
        assert all(len(b) <= 4 for b in buckets)

    def test_stream_is_epoch_permutation(self, corpus):
        _, train, _ = corpus
        buckets = TR._length_buckets(train, 4)
        stream = TR._batch_stream(buckets, Rng(3))
        epoch = [next(stream) for _ in range(len(buckets))]
        ids = sorted(u.id for b in epoch for u in b)
        assert ids == sorted(u.id for u in train)


class TestContextParamNames:
    def test_partition(self):
        model = init_model(TINY, Rng(derive_seed("names", 0)))
        ctx = set(TR.context_param_names(model))
        assert "ctx.dummy" in ctx
        assert "dec.l0.ctx.score_wq" in ctx
        assert "dec.l1.ctx.wv" in ctx
        assert "dec.l0.cross.wq" not in ctx
        assert "text_embed" not in ctx
        assert all(n.startswith("ctx.") or ".ctx." in n for n in ctx)


class TestTrainConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            TR.TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TR.TrainConfig(p_keep=1.5)
        with pytest.raises(ConfigError):
            TR.TrainConfig(phrase_lens=())
        with pytest.raises(ConfigError):
            TR.TrainConfig(phrase_lens=(0,))
        with pytest.raises(ConfigError):
            TR.TrainConfig(lr=0.0)


class TestTrainLoop:
    def small_run(self, corpus, seed=5, **kw):
        lex, train, _ = corpus
        base = dict(batch_size=4, lr=3e-3, phase_a_steps=60, phase_b_steps=20,
                    warmup_steps=5, val_size=4)
        base.update(kw)
        return TR.train(train, lex, TINY, TR.TrainConfig(**base), seed=seed)

    def test_losses_decrease(self, corpus):
        res = self.small_run(corpus)
        a, b = res.phase_a_losses, res.phase_b_losses
        assert np.mean(a[-3:]) < np.mean(a[:3]) - 0.3
        assert np.mean(b[-3:]) < np.mean(b[:3])
        assert 0.0 <= res.val_score_accuracy <= 1.0
        assert np.isfinite(res.val_token_loss)

    def test_same_seed_is_bit_identical(self, corpus):
        r1 = self.small_run(corpus, phase_a_steps=6, phase_b_steps=4)
        r2 = self.small_run(corpus, phase_a_steps=6, phase_b_steps=4)
        assert r1.phase_a_losses == r2.phase_a_losses
        assert r1.phase_b_losses == r2.phase_b_losses
        for n in r1.checkpoint.params:
            np.testing.assert_array_equal(r1.checkpoint.params[n],
                                          r2.checkpoint.params[n])
        assert r1.checkpoint.rng_state == r2.checkpoint.rng_state

    def test_different_seed_differs(self, corpus):
        r1 = self.small_run(corpus, seed=5, phase_a_steps=4, phase_b_steps=0)
        r2 = self.small_run(corpus, seed=6, phase_a_steps=4, phase_b_steps=0)
        assert r1.phase_a_losses != r2.phase_a_losses

    def test_base_parameters_frozen_in_second_phase(self, corpus):
        # gradients must not reach frozen parameters at all
        lex, train, _ = corpus
        model = init_model(TINY, Rng(derive_seed("freeze", 0)))
        ctx_names = set(TR.context_param_names(model))
        model.set_trainable(sorted(ctx_names))
        cfg = TR.TrainConfig(batch_size=4, phase_a_steps=1, phase_b_steps=1, val_size=0)
        batch = TR.build_batch(train[:4], Rng(2), cfg, lexicon=lex, seed=7,
                               with_bias=True)
        from ctxbias.model import encode_context
        ctx = encode_context(model, batch.blist)
        logits, scores, _ = forward_batch(model, batch.audio, batch.audio_pad,
                                          batch.input_ids, ctx)
        loss, _ = TR.compute_loss(logits, scores, batch.targets, batch.g)
        T.backward(loss)
        for name, p in model.params.items():
            if name in ctx_names:
                continue
            assert p.grad is None, name

    def test_nonfinite_failure_names_the_step(self, corpus):
        lex, train, _ = corpus
        model = init_model(TINY, Rng(derive_seed("nan", 0)))
        model.params["out.b"].data[:] = np.nan
        buckets = TR._length_buckets(train[:4], 4)
        cfg = TR.TrainConfig(batch_size=4, phase_a_steps=1, phase_b_steps=0, val_size=0)
        names = [n for n in model.params if n not in set(TR.context_param_names(model))]
        with pytest.raises(NonFiniteError, match="phase A step 0"):
            TR._run_phase(model, lex, buckets, names, cfg, 7, steps=1,
                          rng=Rng(1), with_bias=False, label="A")

    def test_empty_corpus_raises(self, corpus):
        lex, _, _ = corpus
        with pytest.raises(ContractError):
            TR.train([], lex, TINY, TR.TrainConfig(), seed=1)


class TestCheckpoint:
    def trained(self, corpus):
        lex, train, _ = corpus
        cfg = TR.TrainConfig(batch_size=4, phase_a_steps=3, phase_b_steps=2,
                             warmup_steps=2, val_size=4)
        return TR.train(train, lex, TINY, cfg, seed=11)

    def test_round_trip_bit_exact(self, corpus, tmp_path):
        res = self.trained(corpus)
        path = tmp_path / "model.ckpt"
        TR.save_checkpoint(res.checkpoint, path)
        ck = TR.load_checkpoint(path)
        assert ck.config == TINY
        assert ck.step == 5
        assert ck.version == TR.CHECKPOINT_VERSION
        assert ck.rng_state == res.checkpoint.rng_state
        assert set(ck.params) == set(res.checkpoint.params)
        for n, arr in res.checkpoint.params.items():
            np.testing.assert_array_equal(ck.params[n], arr)
        assert set(ck.opt_state) == set(res.checkpoint.opt_state)
        for n, arr in res.checkpoint.opt_state.items():
            np.testing.assert_array_equal(ck.opt_state[n], arr)

    def test_save_is_byte_reproducible(self, corpus, tmp_path):
        res = self.trained(corpus)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        TR.save_checkpoint(res.checkpoint, a)
        TR.save_checkpoint(res.checkpoint, b)
        assert a.read_bytes() == b.read_bytes()

    def test_file_size_arithmetic(self, corpus, tmp_path):
        res = self.trained(corpus)
        path = tmp_path / "model.ckpt"
        TR.save_checkpoint(res.checkpoint, path)
        sections = [res.checkpoint.params, res.checkpoint.opt_state,
                    TR._meta_arrays(res.checkpoint)]
        want = 4 + 4
        for section in sections:
            want += 4
            for name, arr in section.items():
                arr = np.asarray(arr)
                want += 2 + len(name.encode()) + 1 + 8 * arr.ndim + 8 * arr.size
        assert os.path.getsize(path) == want

    def test_restored_model_is_forward_equivalent(self, corpus, tmp_path):
        lex, train, _ = corpus
        res = self.trained(corpus)
        path = tmp_path / "model.ckpt"
        TR.save_checkpoint(res.checkpoint, path)
        model2 = TR.model_from_checkpoint(TR.load_checkpoint(path))
        cfg = TR.TrainConfig(batch_size=4, phase_a_steps=1, phase_b_steps=1, val_size=0)
        batch = TR.build_batch(train[:4], Rng(8), cfg, with_bias=False)
        with T.no_grad():
            l1, _, _ = forward_batch(res.model, batch.audio, batch.audio_pad,
                                     batch.input_ids, None)
            l2, _, _ = forward_batch(model2, batch.audio, batch.audio_pad,
                                     batch.input_ids, None)
        np.testing.assert_array_equal(l1.data, l2.data)

    def test_large_rng_words_survive(self, tmp_path):
        # state words use all 64 bits; the hi/lo split must stay exact
        ck = TR.Checkpoint(config=TINY, params={"w": np.zeros(2)}, opt_state={},
                           step=3, rng_state=(2**64 - 1, 2**53 + 1, 1, 0))
        path = tmp_path / "rng.ckpt"
        TR.save_checkpoint(ck, path)
        assert TR.load_checkpoint(path).rng_state == (2**64 - 1, 2**53 + 1, 1, 0)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            TR.load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(TR.CHECKPOINT_MAGIC + struct.pack("<I", 99))
        with pytest.raises(CheckpointError, match="version 99"):
            TR.load_checkpoint(path)

    def test_truncation_reports_offset(self, corpus, tmp_path):
        res = self.trained(corpus)
        path = tmp_path / "model.ckpt"
        TR.save_checkpoint(res.checkpoint, path)
        blob = path.read_bytes()
        for frac in (0.1, 0.5, 0.9):
            cut = tmp_path / "cut.ckpt"
            cut.write_bytes(blob[: int(len(blob) * frac)])
            with pytest.raises(CheckpointError, match="truncated|byte"):
                TR.load_checkpoint(cut)

    def test_trailing_bytes_rejected(self, corpus, tmp_path):
        res = self.trained(corpus)
        path = tmp_path / "model.ckpt"
        TR.save_checkpoint(res.checkpoint, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CheckpointError, match="trailing"):
            TR.load_checkpoint(path)

    def test_missing_metadata_rejected(self, tmp_path):
        empty = struct.pack("<I", 0)
        path = tmp_path / "meta.ckpt"
        path.write_bytes(TR.CHECKPOINT_MAGIC + struct.pack("<I", 1) + empty * 3)
        with pytest.raises(CheckpointError, match="metadata"):
            TR.load_checkpoint(path)
