import itertools

import numpy as np
import pytest

from conftest import make_model, make_vocab, numeric_grad, rel_error, sent
from wakesleep_nmt import autodiff as ad
from wakesleep_nmt.corpus import Bitext, Sentence
from wakesleep_nmt.exactinference import enumerate_sentences
from wakesleep_nmt.rng import stream
from wakesleep_nmt.seq2seq import (
    BACKWARD, FORWARD, DecodeConfig, EarlyStopper, ModelConfig, Seq2Seq, decode, log_prob, next_token_distribution,
    score, sequence_log_probs, step_log_probs, train_mle, translate, truncated_log_prob,
)


class TestScoring:
    def test_log_prob_nonpositive(self):
        m = make_model(seed=3)
        for x, y in [(sent(1), sent(2, 3)), (sent(3, 3, 1), sent()), (sent(2), sent(1, 1, 1, 1))]:
            assert log_prob(m, x, y) <= 0

    def test_equals_sum_of_incremental_steps(self):
        m = make_model(seed=4)
        x, y = sent(1, 2, 3), sent(3, 2, 2, 1)
        steps = step_log_probs(m, x, y)
        assert len(steps) == len(y)
        assert log_prob(m, x, y) == pytest.approx(steps.sum(), abs=1e-12)

    def test_batch_padding_does_not_change_scores(self):
        m = make_model(seed=5)
        xs = [sent(1), sent(2, 3, 1, 2), sent(3, 3)]
        ys = [sent(1, 2, 3, 1), sent(2), sent()]
        batched = score(m, xs, ys)
        single = [log_prob(m, x, y) for x, y in zip(xs, ys)]
        np.testing.assert_allclose(batched, single, atol=1e-12)

    def test_next_token_distribution_sums_to_one(self):
        m = make_model(src_size=5, trg_size=6, seed=6)
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = Sentence(tuple(rng.integers(1, 5, size=rng.integers(0, 4))) + (0,))
            prefix = tuple(rng.integers(1, 6, size=rng.integers(0, 4)))
            p = next_token_distribution(m, x, prefix)
            assert np.all(p > 0)
            assert abs(p.sum() - 1.0) < 1e-9

    def test_two_token_vocab_mass_with_continuation(self):
        # output vocabulary {a, EOS}: sentences a^k EOS for k < L, plus the mass of a^L continuing
        m = make_model(trg_size=2, seed=7, max_len=8)
        x = sent(1, 2)
        for L in (1, 3, 6):
            finished = sum(np.exp(log_prob(m, x, Sentence((1,) * k + (0,)))) for k in range(L))
            cont = np.exp(step_log_probs(m, x, Sentence((1,) * L + (0,)))[:-1].sum())
            assert finished + cont == pytest.approx(1.0, abs=1e-9)

    def test_truncated_scoring(self):
        m = make_model(trg_size=3, seed=8)
        x = sent(2)
        ys = list(enumerate_sentences(3, 0, 4))
        direct = [truncated_log_prob(m, x, y, 4) for y in ys]
        np.testing.assert_allclose(score(m, [x] * len(ys), ys, truncate_at=4), direct, atol=1e-12)
        assert np.exp(direct).sum() == pytest.approx(1.0, abs=1e-9)

    def test_overlong_input_rejected(self):
        m = make_model(max_len=4)
        with pytest.raises(ValueError, match="max_len"):
            log_prob(m, sent(1, 1, 1, 1), sent(1))


class TestGradients:
    def test_loss_with_dropout_matches_finite_differences(self):
        m = make_model(src_size=5, trg_size=5, emb=3, hidden=4, seed=9)
        xs, ys = [sent(1, 2, 3), sent(4)], [sent(2, 2), sent(1, 3, 4)]

        def loss():
            return -ad.sum(sequence_log_probs(m, xs, ys, 0.3, stream(0, "drop")))

        loss().backward()
        for name in ("dec_Whc", "att_v", "encb_Wx", "emb_out"):
            p = m.params[name]

            def f():
                with ad.no_grad():
                    return float(loss().data)

            num = numeric_grad(f, p.data, 1e-5)
            assert rel_error(p.grad, num).max() < 1e-5, name


class TestDecode:
    def test_greedy_deterministic_and_idempotent(self):
        m = make_model(src_size=5, trg_size=5, seed=10)
        x = sent(1, 4, 2)
        y1 = decode(m, x, DecodeConfig("greedy"))
        assert decode(m, x, DecodeConfig("greedy")) == y1
        assert y1.token_ids[-1] == 0 and 0 not in y1.token_ids[:-1]

    def test_greedy_is_stepwise_argmax(self):
        m = make_model(src_size=5, trg_size=5, seed=11)
        x = sent(3, 1)
        y = decode(m, x, DecodeConfig("greedy"))
        for t, tok in enumerate(y.token_ids[:-1]):
            p = next_token_distribution(m, x, y.token_ids[:t])
            assert tok == int(np.argmax(p))

    def test_beam_width_one_is_greedy(self):
        for seed in range(6):
            m = make_model(src_size=5, trg_size=6, seed=seed)
            for x in (sent(1), sent(2, 3, 4), sent(4, 4)):
                assert decode(m, x, DecodeConfig("beam", beam_width=1)) == decode(m, x, DecodeConfig("greedy"))

    def test_beam_dominates_greedy_exhaustively(self):
        max_len = 4
        for seed in range(8):
            m = make_model(src_size=3, trg_size=3, seed=seed, scale=1.5, max_len=max_len)
            ys = list(enumerate_sentences(3, 0, max_len))
            for x in (sent(1), sent(2, 1), sent(1, 2, 2)):
                lp = score(m, [x] * len(ys), ys)
                beam = decode(m, x, DecodeConfig("beam", beam_width=10))
                greedy = decode(m, x, DecodeConfig("greedy"))
                assert log_prob(m, x, beam) >= log_prob(m, x, greedy) - 1e-12
                # width 10 keeps every prefix of a 2-token alphabet, so the search is exact
                assert log_prob(m, x, beam) == pytest.approx(lp.max(), abs=1e-12)

    def test_max_len_forces_eos(self):
        m = make_model(trg_size=2, seed=12, max_len=6)
        for mode in ("greedy", "sample", "beam"):
            y = decode(m, sent(1), DecodeConfig(mode, max_len=3))
            assert len(y) <= 3 and y.token_ids[-1] == 0

    def test_sample_same_seed(self):
        m = make_model(src_size=5, trg_size=5, seed=13)
        xs = [sent(i % 4 + 1) for i in range(30)]
        cfg = DecodeConfig("sample", seed=77)
        assert translate(m, xs, cfg) == translate(m, xs, cfg)
        assert translate(m, xs, cfg) != translate(m, xs, DecodeConfig("sample", seed=78))

    def test_sample_independent_of_workers_and_chunking(self):
        m = make_model(src_size=5, trg_size=5, seed=14)
        xs = [sent(i % 4 + 1, 2) for i in range(50)]
        cfg = DecodeConfig("sample", seed=3)
        a = translate(m, xs, cfg, workers=1, chunk=64)
        assert translate(m, xs, cfg, workers=3, chunk=64) == a
        g = DecodeConfig("greedy")
        assert translate(m, xs, g, workers=1, chunk=7) == translate(m, xs, g, workers=4, chunk=64)

    def test_sample_first_step_frequencies(self):
        m = make_model(src_size=4, trg_size=5, seed=15, scale=1.0)
        x = sent(1, 3)
        p = next_token_distribution(m, x)
        n = 100_000
        ys = translate(m, [x] * n, DecodeConfig("sample", max_len=2, seed=9), chunk=20_000)
        freq = np.bincount([y.token_ids[0] for y in ys], minlength=5) / n
        assert 0.5 * np.abs(freq - p).sum() < 0.02

    def test_temperature_validation(self):
        with pytest.raises(ValueError):
            DecodeConfig("sample", temperature=0.0)
        with pytest.raises(ValueError):
            DecodeConfig("beam", beam_width=0)
        with pytest.raises(ValueError):
            DecodeConfig("nucleus")


def toy_bitext(pairs, src, trg):
    return Bitext(tuple((src.sentence(a.split()), trg.sentence(b.split())) for a, b in pairs), src, trg)


class TestTraining:
    def setup_method(self):
        self.src = make_vocab(4)
        self.trg = make_vocab(4)
        self.cfg = ModelConfig(emb_dim=8, hidden=12, max_len=8)

    def model(self, direction=FORWARD, seed=0):
        return Seq2Seq.init(self.cfg, self.src, self.trg, direction, stream(seed, "init"))

    def test_overfit_single_pair(self):
        data = toy_bitext([("t1 t2", "t2 t1")], self.src, self.trg)
        hyper = ad.TrainHyper(batch_size=1, dropout_prob=0.0, max_epochs=150, lr=0.01)
        res = train_mle(self.model(), data, hyper, rng=stream(0, "t"))
        x = self.src.sentence(["t1", "t2"])
        assert self.trg.words(decode(res.model, x, DecodeConfig("greedy"))) == ["t2", "t1"]
        losses = [h["train_loss"] for h in res.history]
        assert np.all(np.isfinite(losses)) and losses[0] >= losses[-1]

    def test_zero_epochs_returns_unchanged(self):
        data = toy_bitext([("t1", "t2")], self.src, self.trg)
        m = self.model()
        res = train_mle(m, data, ad.TrainHyper(max_epochs=0), rng=stream(0, "t"))
        assert res.model.checkpoint_hash() == m.checkpoint_hash()
        assert res.model is not m

    def test_same_seed_bitwise_identical(self):
        data = toy_bitext([("t1 t2", "t2"), ("t3", "t1 t1"), ("t2 t3 t1", "t3")], self.src, self.trg)
        hyper = ad.TrainHyper(batch_size=2, max_epochs=3, lr=0.01)
        a = train_mle(self.model(), data, hyper, rng=stream(1, "t"))
        b = train_mle(self.model(), data, hyper, rng=stream(1, "t"))
        assert a.model.checkpoint_hash() == b.model.checkpoint_hash()
        c = train_mle(self.model(), data, hyper, rng=stream(2, "t"))
        assert c.model.checkpoint_hash() != a.model.checkpoint_hash()

    def test_backward_direction_trains_on_flipped_pairs(self):
        data = toy_bitext([("t1 t2", "t3")], self.src, self.trg)
        hyper = ad.TrainHyper(batch_size=1, dropout_prob=0.0, max_epochs=100, lr=0.01)
        res = train_mle(self.model(BACKWARD), data, hyper, rng=stream(0, "t"))
        y = self.trg.sentence(["t3"])
        assert self.src.words(decode(res.model, y, DecodeConfig("greedy"))) == ["t1", "t2"]

    def test_empty_data(self):
        with pytest.raises(ValueError):
            train_mle(self.model(), Bitext((), self.src, self.trg), ad.TrainHyper())

    def test_early_stopping_keeps_best_checkpoint(self):
        data = toy_bitext([("t1", "t2")], self.src, self.trg)
        scores = iter([1.0, 5.0, 3.0, 2.0, 4.0, 9.0])
        seen = {}

        def score_fn(model):
            value = next(scores)
            seen[value] = model.checkpoint_hash()
            return value

        stopper = EarlyStopper(score_fn, patience=3)
        res = train_mle(self.model(), data, ad.TrainHyper(max_epochs=10), stopper=stopper, rng=stream(0, "t"))
        assert [h["epoch"] for h in res.history] == [0, 1, 2, 3, 4]
        assert res.best_epoch == 1
        assert res.model.checkpoint_hash() == seen[5.0]


class TestCheckpoint:
    def test_save_load(self, tmp_path):
        m = make_model(seed=16, direction=BACKWARD)
        h = m.save(tmp_path / "phi.ckpt")
        back = Seq2Seq.load(tmp_path / "phi.ckpt", m.out_vocab, m.in_vocab)
        assert back.direction == BACKWARD and back.checkpoint_hash() == h
        x, y = sent(1, 2), sent(3)
        assert log_prob(back, x, y) == log_prob(m, x, y)

    def test_vocab_mismatch(self, tmp_path):
        m = make_model(seed=17)
        m.save(tmp_path / "t.ckpt")
        with pytest.raises(ValueError, match="vocabulary"):
            Seq2Seq.load(tmp_path / "t.ckpt", make_vocab(5), m.out_vocab)

    def test_parameter_layout_shared_by_directions(self):
        a = make_model(src_size=4, trg_size=6, direction=FORWARD)
        b = make_model(src_size=4, trg_size=6, direction=BACKWARD)
        assert sorted(a.params) == sorted(b.params)
        assert a.params["out_W"].shape[1] == 6 and b.params["out_W"].shape[1] == 4

    def test_all_parameter_names(self):
        names = set(make_model().params)
        expected = {"emb_in", "emb_out", "init_W", "init_b", "att_Wk", "att_Wq", "att_v", "out_W", "out_b"}
        expected |= {f"{p}_{s}" for p, s in itertools.product(("encf", "encb", "dec"), ("Wx", "b", "Wh", "Whc"))}
        assert names == expected
