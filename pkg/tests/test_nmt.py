import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from constraint_qt.mine import ConstraintMask
from constraint_qt.nmt import (
    AdamConfig, AdamState, DecodeConfig, TrainConfig, TrainingDiverged, adam_step, beam_search,
    candidate_smoothed_loss, constrained_softmax, forward, greedy_decode, init_params, lr_schedule, train,
)
from constraint_qt.nmt.checkpoint import MAGIC, CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from constraint_qt.nmt.decode import length_penalty, sequence_logprob
from constraint_qt.nmt.loss import backward, log_softmax, softmax
from constraint_qt.nmt.model import LN_EPS, positional_encoding
from constraint_qt.nmt.train import ParallelCorpus, make_batches
from constraint_qt.textproc import BOS, EOS, PAD, UNK, TokenSequence, Vocabulary

from fd_check import directional_check, toy_problem


def small_model(seed=0, tgt_vocab=13, src_vocab=11):
    return init_params(2, 16, 2, 32, src_vocab, tgt_vocab, seed=seed)


class TestForward:
    def test_residual_identity(self):
        params = small_model(1)
        for name, t in params.tensors.items():
            if any(k in name for k in (".self.", ".cross.", ".ff.")):
                t[...] = 0.0
        tgt = np.array([[BOS, 5, 7, 9]])
        logits = forward(params, np.array([[4, 6]]), tgt)
        D = params.d_model
        x = params["tgt_emb"][tgt[0]] * math.sqrt(D) + positional_encoding(4, D)
        xc = x - x.mean(-1, keepdims=True)
        h = xc / np.sqrt((xc ** 2).mean(-1, keepdims=True) + LN_EPS)
        expected = h @ params["tgt_emb"].T + params["out_bias"]
        np.testing.assert_allclose(logits[0], expected, rtol=0, atol=1e-12)

    def test_causality(self):
        params = small_model(2)
        src = np.array([[4, 5, 6]])
        tgt = np.array([[BOS, 4, 5, 6, 7]])
        base = forward(params, src, tgt)
        for j in range(1, 5):
            changed = tgt.copy()
            changed[0, j] = 12
            out = forward(params, src, changed)
            assert np.array_equal(out[0, :j], base[0, :j])
            assert not np.array_equal(out[0, j:], base[0, j:])

    def test_batch_permutation(self):
        params = small_model(3)
        rng = np.random.default_rng(0)
        src = rng.integers(4, 11, size=(4, 5))
        tgt = rng.integers(4, 13, size=(4, 3))
        perm = np.array([2, 0, 3, 1])
        np.testing.assert_allclose(forward(params, src, tgt)[perm], forward(params, src[perm], tgt[perm]),
                                   rtol=0, atol=1e-12)

    def test_source_padding_is_invisible(self):
        params = small_model(4)
        tgt = np.array([[BOS, 5]])
        a = forward(params, np.array([[4, 6]]), tgt)
        b = forward(params, np.array([[4, 6, PAD, PAD]]), tgt)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_shape_errors(self):
        params = small_model()
        with pytest.raises(ValueError):
            forward(params, np.array([[4, 11]]), np.array([[BOS]]))
        with pytest.raises(ValueError):
            forward(params, np.array([[4], [5]]), np.array([[BOS]]))
        with pytest.raises(ValueError):
            init_params(1, 10, 3, 8, 5, 5)
        bad = small_model()
        bad.tensors["src_emb"] = bad.tensors["src_emb"][:, :3]
        with pytest.raises(ValueError):
            bad.check()


class TestBackward:
    def test_output_bias_closed_form(self):
        params, (src, tgt_in, gold, _) = toy_problem(0)
        _, grads = backward(params, src, tgt_in, gold, None, alpha=1.0)
        p = softmax(forward(params, src, tgt_in))
        onehot = np.eye(params.tgt_vocab)[gold]
        keep = (gold != PAD)[..., None]
        expected = ((p - onehot) * keep).sum((0, 1)) / keep.sum()
        np.testing.assert_allclose(grads["out_bias"], expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        params, batch = toy_problem(seed)
        errors = directional_check(params, batch)
        assert set(errors) == set(params.names())
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-4, (worst, errors[worst])

    def test_pad_positions_have_no_effect(self):
        params, (src, tgt_in, gold, masks) = toy_problem(1)
        loss, grads = backward(params, src, tgt_in, gold, masks, 0.6)
        # Row 2 has PAD gold from position 2 on; its input there only feeds PAD positions.
        changed = tgt_in.copy()
        changed[2, 3:] = 7
        loss2, grads2 = backward(params, src, changed, gold, masks, 0.6)
        assert loss2 == loss
        for name in params.names():
            np.testing.assert_allclose(grads2[name], grads[name], rtol=0, atol=1e-15, err_msg=name)
        # Padded source positions are never attended to.
        assert np.all(grads["src_emb"][PAD] == 0.0)

    def test_padded_targets_are_skipped(self):
        params, (src, tgt_in, gold, masks) = toy_problem(2)
        short = backward(params, src[2:], tgt_in[2:, :3], gold[2:, :3], masks[2:], 0.6)[0]
        padded = backward(params, src[2:], tgt_in[2:], gold[2:], masks[2:], 0.6)[0]
        assert short == pytest.approx(padded, abs=1e-12)

    def test_non_finite_gradient_names_tensor(self):
        params, (src, tgt_in, gold, masks) = toy_problem(0)
        params.tensors["dec.0.ff.w1"][0, 0] = np.inf
        with pytest.raises(FloatingPointError, match=r"non-finite gradient in tensor \S+"):
            backward(params, src, tgt_in, gold, masks, 0.6)


class TestLoss:
    def test_alpha_one_is_cross_entropy(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(3, 4, 9))
        gold = rng.integers(4, 9, size=(3, 4))
        mask = np.zeros(9, dtype=bool)
        mask[[4, 5, 6]] = True
        ce = -np.take_along_axis(log_softmax(logits), gold[..., None], -1).mean()
        assert abs(candidate_smoothed_loss(logits, gold, mask, 1.0) - ce) < 1e-12

    def test_worked_example(self):
        # Specials get negligible mass; g, c1, c2, o are ids 4..7.
        logits = np.concatenate([np.full(4, -1e3), np.log([0.4, 0.3, 0.2, 0.1])])[None]
        mask = np.zeros(8, dtype=bool)
        mask[[4, 5, 6]] = True
        expected = -(0.6 * math.log(0.4) + 0.2 * math.log(0.3) + 0.2 * math.log(0.2))
        got = candidate_smoothed_loss(logits, np.array([4]), mask, 0.6)
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(1.1125, abs=1e-4)

    def test_empty_and_fallback_masks_give_cross_entropy(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(1, 3, 7))
        gold = np.array([[4, 5, EOS]])
        ce = candidate_smoothed_loss(logits, gold, None, 1.0)
        empty = ConstraintMask(np.zeros(7, dtype=bool), False)
        full = ConstraintMask(np.ones(7, dtype=bool), True)
        assert candidate_smoothed_loss(logits, gold, empty, 0.6) == ce
        assert candidate_smoothed_loss(logits, gold, full, 0.6) == ce

    def test_gold_only_mask_is_one_hot(self):
        logits = np.log(np.array([[0.5, 0.25, 0.25]]))
        assert candidate_smoothed_loss(logits, np.array([1]), np.array([False, True, False]), 0.6) == \
            pytest.approx(math.log(4), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 1.0))
    def test_not_below_scaled_cross_entropy(self, seed, alpha):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(2, 3, 6)) * 3
        gold = rng.integers(0, 6, size=(2, 3))
        mask = rng.random(6) < 0.5
        ce = candidate_smoothed_loss(logits, gold, None, 1.0)
        assert candidate_smoothed_loss(logits, gold, mask, alpha) >= alpha * ce - 1e-12

    def test_affine_in_alpha(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(2, 5, 10))
        gold = rng.integers(4, 10, size=(2, 5))
        gold[1, 3:] = PAD
        masks = [rng.random(10) < 0.5, rng.random(10) < 0.5]
        a, b, c = (candidate_smoothed_loss(logits, gold, masks, x) for x in (0.2, 0.6, 1.0))
        assert abs((b - a) / 0.4 - (c - b) / 0.4) < 1e-9

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            candidate_smoothed_loss(np.zeros((1, 4)), np.array([1]), None, 0.0)


class TestConstrainedSoftmax:
    def test_hand_case(self):
        p = constrained_softmax(np.array([1.0, 0.0, -1.0]), np.array([True, False, True]))
        assert p[0] == pytest.approx(math.e / (math.e + math.exp(-1)), abs=1e-12)
        assert p[0] == pytest.approx(0.8808, abs=1e-4)
        assert p[2] == pytest.approx(0.1192, abs=1e-4)
        assert p[1] == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_mass_properties(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(3, 20)) * 10
        mask = rng.random(20) < 0.3
        mask[rng.integers(20)] = True
        p = constrained_softmax(logits, mask)
        assert np.all(p[:, ~mask] == 0.0)
        assert np.all(np.abs(p.sum(-1) - 1.0) <= 1e-9)
        full = constrained_softmax(logits, np.ones(20, dtype=bool))
        assert np.max(np.abs(full - softmax(logits))) <= 1e-12
        shifted = constrained_softmax(logits + 123.0, mask)
        assert np.array_equal(p.argmax(-1), shifted.argmax(-1))

    def test_large_logits_are_stable(self):
        p = constrained_softmax(np.array([1000.0, 999.0, -1000.0]), np.array([True, True, False]))
        assert np.all(np.isfinite(p)) and p.sum() == pytest.approx(1.0)

    def test_fallback_mask_means_full_vocabulary(self):
        logits = np.array([0.3, -0.2, 1.5])
        m = ConstraintMask(np.ones(3, dtype=bool), True)
        np.testing.assert_allclose(constrained_softmax(logits, m), softmax(logits), rtol=0, atol=1e-15)

    def test_weights_hook(self):
        logits = np.zeros(3)
        p = constrained_softmax(logits, np.array([True, True, False]), weights=np.array([3.0, 1.0, 1.0]))
        np.testing.assert_allclose(p, [0.75, 0.25, 0.0], atol=1e-15)


class TestOptimizer:
    def test_schedule_identities(self):
        D, w = 64, 200
        assert lr_schedule(1, D, w) == pytest.approx(D ** -0.5 * w ** -1.5, rel=1e-15)
        assert w ** -0.5 == pytest.approx(w * w ** -1.5, rel=1e-15)
        peak = lr_schedule(w, D, w)
        assert peak == max(lr_schedule(s, D, w) for s in range(1, 2000))
        assert lr_schedule(4 * w, D, w) == pytest.approx(D ** -0.5 * (4 * w) ** -0.5, rel=1e-15)
        with pytest.raises(ValueError):
            lr_schedule(0, D, w)

    def test_zero_gradients_leave_params(self):
        tensors = {"w": np.arange(6.0).reshape(2, 3)}
        state = AdamState()
        for _ in range(3):
            adam_step(tensors, {"w": np.zeros((2, 3))}, 0.1, AdamConfig(), state)
        assert np.array_equal(tensors["w"], np.arange(6.0).reshape(2, 3))

    def test_first_step_matches_hand_computation(self):
        cfg = AdamConfig(beta1=0.9, beta2=0.98, eps=1e-9)
        tensors = {"w": np.array([1.0, -2.0])}
        g = np.array([0.5, -0.1])
        adam_step(tensors, {"w": g}, 0.01, cfg, AdamState())
        # Bias correction makes the first step lr * g / (|g| + eps).
        np.testing.assert_allclose(tensors["w"], [1.0 - 0.01 * 0.5 / (0.5 + 1e-9), -2.0 + 0.01 * 0.1 / (0.1 + 1e-9)],
                                   rtol=0, atol=1e-15)

    def test_two_steps_against_reference_recursion(self):
        cfg = AdamConfig()
        w = np.array([0.3])
        tensors = {"w": w.copy()}
        state = AdamState()
        m = v = 0.0
        for t, g in enumerate([0.2, -0.4], start=1):
            adam_step(tensors, {"w": np.array([g])}, 0.05, cfg, state)
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            w = w - 0.05 * (m / (1 - cfg.beta1 ** t)) / (math.sqrt(v / (1 - cfg.beta2 ** t)) + cfg.eps)
        np.testing.assert_allclose(tensors["w"], w, rtol=0, atol=1e-15)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        params = small_model(5)
        save_checkpoint(tmp_path / "m.ckpt", params, {"step": 7})
        loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert meta == {"step": 7}
        assert loaded.hyper() == params.hyper()
        for name in params.names():
            assert np.array_equal(loaded[name], params[name].astype(np.float32).astype(np.float64))

    def test_byte_layout(self):
        params = init_params(1, 4, 2, 8, 5, 6, seed=0)
        data = dumps(params)
        assert data.startswith(MAGIC)
        version, header_len = np.frombuffer(data[8:16], dtype="<u4")
        assert version == 1
        header = data[16:16 + header_len].decode("utf-8")
        assert '"model"' in header
        (count,) = np.frombuffer(data[16 + header_len:20 + header_len], dtype="<u4")
        assert count == len(params.names())
        off = 20 + header_len
        (name_len,) = np.frombuffer(data[off:off + 2], dtype="<u2")
        assert data[off + 2:off + 2 + name_len] == b"src_emb"
        assert data[off + 2 + name_len] == 2

    def test_deterministic_bytes(self):
        assert dumps(small_model(1), {"a": 1}) == dumps(small_model(1), {"a": 1})

    def test_rejects_garbage(self):
        data = dumps(small_model())
        for bad in (b"nope" + data[4:], data[:8] + b"\x09\x00\x00\x00" + data[12:], data[:-3]):
            with pytest.raises(CheckpointError):
                loads(bad)


def trained_toy(seed=0):
    params = small_model(seed, tgt_vocab=9)
    # Sharpen the output layer so decoding sees peaked, distinct distributions.
    params.tensors["out_bias"] = np.random.default_rng(seed).normal(0.0, 2.0, 9)
    return params


class TestDecoding:
    @pytest.mark.parametrize("seed", range(5))
    def test_beam_one_is_greedy(self, seed):
        params = trained_toy(seed)
        src = np.array([4, 5, 6])
        hyp = beam_search(params, src, DecodeConfig(beam_size=1, max_len=6))
        assert list(hyp.tokens) == greedy_decode(params, src, 6)

    @pytest.mark.parametrize("seed", range(5))
    def test_exhaustive_search(self, seed):
        params = trained_toy(seed)
        src = np.array([4, 7])
        lp, max_len = 0.6, 3
        emit = [t for t in range(9) if t not in (PAD, BOS, EOS)]
        best = None
        for n in range(max_len + 1):
            for toks in itertools.product(emit, repeat=n):
                ended = n < max_len
                lpb = sequence_logprob(params, src, toks, ended=ended)
                score = lpb / length_penalty(n + ended, lp)
                if best is None or score > best[0] + 1e-12:
                    best = (score, toks)
        hyp = beam_search(params, src, DecodeConfig(beam_size=9 ** 3, length_penalty=lp, max_len=max_len))
        assert hyp.tokens == best[1]
        assert hyp.score == pytest.approx(best[0], abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_mask_compliance(self, seed):
        params = trained_toy(seed)
        rng = np.random.default_rng(seed)
        for _ in range(10):
            allowed = np.zeros(9, dtype=bool)
            allowed[rng.choice(np.arange(4, 9), size=2, replace=False)] = True
            allowed[EOS] = True
            mask = ConstraintMask(allowed, False)
            hyp = beam_search(params, rng.integers(4, 11, size=3), DecodeConfig(beam_size=3, max_len=5), mask)
            assert all(allowed[t] for t in hyp.tokens)
            assert all(allowed[t] for t in greedy_decode(params, np.array([4, 5]), 5, mask))

    def test_never_emits_pad_or_bos(self):
        params = trained_toy(1)
        params.tensors["out_bias"][[PAD, BOS]] = 50.0
        hyp = beam_search(params, np.array([4]), DecodeConfig(beam_size=4, max_len=4))
        assert not set(hyp.tokens) & {PAD, BOS}

    def test_max_len_forces_finish(self):
        params = trained_toy(2)
        params.tensors["out_bias"][EOS] = -50.0
        hyp = beam_search(params, np.array([4]), DecodeConfig(beam_size=2, max_len=3))
        assert len(hyp.tokens) == 3 and not hyp.ended

    def test_deterministic(self):
        params = trained_toy(3)
        cfg = DecodeConfig(beam_size=4, max_len=5)
        assert beam_search(params, np.array([4, 5]), cfg) == beam_search(params, np.array([4, 5]), cfg)

    def test_empty_source(self):
        with pytest.raises(ValueError):
            beam_search(trained_toy(), np.array([], dtype=int), DecodeConfig())

    def test_config_checks(self):
        with pytest.raises(ValueError):
            DecodeConfig(beam_size=0)
        with pytest.raises(ValueError):
            DecodeConfig(max_len=0)


def copy_corpus(n=200, seed=0):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(20)]
    pairs = []
    for _ in range(n):
        toks = tuple(rng.choice(words, size=rng.integers(1, 5)))
        pairs.append((TokenSequence(toks, "src"), TokenSequence(toks, "tgt")))
    vocab = Vocabulary(words)
    return ParallelCorpus(pairs, vocab, vocab)


class TestTraining:
    def test_config_checks(self):
        with pytest.raises(ValueError):
            TrainConfig(alpha=0.0)
        with pytest.raises(ValueError):
            TrainConfig(warmup_steps=0)
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"alpha": 0.5, "bogus": 1})
        cfg = TrainConfig(alpha=0.5, seed=3)
        assert TrainConfig.from_dict(__import__("json").loads(cfg.to_json())) == cfg

    def test_batches_cover_corpus(self):
        lengths = [3, 1, 4, 1, 5, 9, 2, 6]
        batches = make_batches(lengths, 8, np.random.default_rng(0))
        assert sorted(i for b in batches for i in b) == list(range(len(lengths)))
        assert all(sum(lengths[i] for i in b) <= 8 or len(b) == 1 for b in batches)

    @pytest.mark.slow
    def test_copy_task(self):
        corpus = copy_corpus()
        result = train(TrainConfig(max_steps=500, seed=0), corpus)
        assert len(result.loss_history) == 500
        assert np.mean(result.loss_history[-20:]) < 0.1

    def test_deterministic_loss_history(self):
        corpus = copy_corpus(40)
        cfg = TrainConfig(max_steps=15, seed=4, layers=1, d_model=16, heads=2, d_ff=32, batch_tokens=64)
        a, b = train(cfg, corpus), train(cfg, corpus)
        assert a.loss_history == b.loss_history
        for name in a.params.names():
            assert np.array_equal(a.params[name], b.params[name])

    def test_constraint_toggle(self):
        from constraint_qt.mine import ConstraintTable

        corpus = copy_corpus(40)
        table = ConstraintTable(3, {f"w{i}": (f"w{i}", f"w{(i + 1) % 20}") for i in range(20)})
        cfg = TrainConfig(max_steps=10, seed=1, layers=1, d_model=16, heads=2, d_ff=32, batch_tokens=64)
        plain = train(cfg, corpus, table)
        smooth = train(TrainConfig(**{**cfg.__dict__, "constraint_in_training": True}), corpus, table)
        assert plain.loss_history != smooth.loss_history
        assert {k: v.shape for k, v in plain.params.tensors.items()} == \
            {k: v.shape for k, v in smooth.params.tensors.items()}
        no_table = train(TrainConfig(**{**cfg.__dict__, "constraint_in_training": True}), corpus, None)
        assert no_table.loss_history == plain.loss_history

    def test_smoothing_set_excludes_specials(self):
        from constraint_qt.mine import ConstraintTable

        corpus = copy_corpus(5)
        table = ConstraintTable(2, {"w1": ("w2", "w3")})
        s = corpus.smoothing_set(table, TokenSequence(("w1", "zz"), "src"))
        assert s[corpus.tgt_vocab.id_of["w2"]] and s[corpus.tgt_vocab.id_of["w3"]]
        assert not s[EOS] and not s[UNK]
        assert corpus.smoothing_set(table, TokenSequence(("zz",), "src")) is None

    def test_divergence_reports_step(self):
        corpus = copy_corpus(20)
        cfg = TrainConfig(max_steps=50, seed=0, layers=1, d_model=16, heads=2, d_ff=32, batch_tokens=64)
        init = init_params(1, 16, 2, 32, len(corpus.src_vocab), len(corpus.tgt_vocab), seed=0)
        init.tensors["out_bias"][5] = np.inf
        with pytest.raises(TrainingDiverged) as info:
            train(cfg, corpus, init=init)
        assert info.value.step == 1

    def test_checkpoints_written(self, tmp_path):
        corpus = copy_corpus(20)
        cfg = TrainConfig(max_steps=6, seed=0, layers=1, d_model=16, heads=2, d_ff=32, batch_tokens=64,
                          checkpoint_every=3, checkpoint_dir=str(tmp_path))
        result = train(cfg, corpus)
        assert [p.rsplit("/", 1)[1] for p in result.checkpoints] == ["step000003.ckpt", "step000006.ckpt"]
        loaded, meta = load_checkpoint(result.checkpoints[-1])
        assert meta == {"step": 6}
