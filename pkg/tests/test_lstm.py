import io
import random

import numpy as np
import pytest

from disfluency.lstm import (
    EmptyCorpusError, LstmConfig, LstmModel, build_vocab, check_gradients, init_model,
    lstm_logprob, next_word_distribution, perplexity, train_lstm,
)

TINY = dict(layers=2, hidden=4, embed=3, batch=4, epochs=2)


def tiny_model(seed, words="a b c d".split(), **kw):
    cfg = LstmConfig(**{**TINY, "seed": seed, "init_scale": 0.5, **kw})
    return init_model(build_vocab([words]), cfg)


def random_batch(rng, words="a b c d x".split(), n=3):
    return [[rng.choice(words) for _ in range(rng.randint(0, 5))] for _ in range(n)]


def test_learns_deterministic_sequence():
    m = train_lstm([["a", "b", "c"]] * 200, LstmConfig.desk(hidden=16, embed=16, epochs=6, seed=1))
    assert perplexity(m, [["a", "b", "c"]]) < 2.0


def test_learning_rate_schedule():
    cfg = LstmConfig()
    assert cfg.learning_rate(6) == 0.25
    assert [cfg.learning_rate(e) for e in (1, 4, 5)] == [1.0, 1.0, 0.5]


def test_same_seed_bitwise_identical():
    corpus = random_batch(random.Random(0), n=30)
    cfg = LstmConfig.desk(hidden=8, embed=8, epochs=2, seed=3)
    assert train_lstm(corpus, cfg).to_bytes() == train_lstm(corpus, cfg).to_bytes()


def test_empty_corpus():
    with pytest.raises(EmptyCorpusError):
        train_lstm([], LstmConfig.desk())


def test_invalid_config():
    with pytest.raises(ValueError):
        LstmConfig(hidden=0)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_check(seed):
    rng = random.Random(seed)
    assert check_gradients(tiny_model(seed), random_batch(rng)) < 1e-4


def test_gradient_check_backward_direction():
    m = tiny_model(5, direction="backward", layers=1)
    assert check_gradients(m, random_batch(random.Random(5))) < 1e-4


def test_gradient_check_empty_batch():
    assert check_gradients(tiny_model(0), []) == 0.0


def test_corrupted_forget_gate_is_detected():
    m = tiny_model(1)
    err = check_gradients(m, random_batch(random.Random(1)), forget_gate_scale=0.5)
    assert err > 1e-2


def test_softmax_normalised_and_logprob_nonpositive():
    m = tiny_model(2)
    rng = random.Random(2)
    for s in random_batch(rng, n=20):
        p = next_word_distribution(m, s)
        assert p.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.all(p >= 0)
        assert lstm_logprob(m, s) <= 0.0


def test_empty_sentence_is_one_transition():
    m = tiny_model(4)
    p = next_word_distribution(m, [])
    assert lstm_logprob(m, []) == pytest.approx(np.log(p[m.index["</s>"]]), abs=1e-12)


def test_oov_scores_finitely():
    m = tiny_model(0)
    assert np.isfinite(lstm_logprob(m, ["never", "seen", "a"]))
    assert lstm_logprob(m, ["never"]) == lstm_logprob(m, ["<unk>"])


def test_palindromic_corpus_symmetry():
    corpus = [["a", "b", "a"], ["b", "c", "c", "b"], ["c"], ["a", "c", "b", "c", "a"]] * 10
    kw = dict(hidden=8, embed=8, epochs=3, seed=7)
    fwd = train_lstm(corpus, LstmConfig.desk(**kw))
    bwd = train_lstm(corpus, LstmConfig.desk(direction="backward", **kw))
    for s in (["a", "b"], ["c", "b", "a"], ["b", "c", "c", "b"], []):
        assert fwd.to_bytes().split(b"\n", 2)[2] == bwd.to_bytes().split(b"\n", 2)[2]
        assert lstm_logprob(fwd, s) == lstm_logprob(bwd, s[::-1])


def test_reversal_closed_corpus_scores_agree_closely():
    rng = random.Random(11)
    base = random_batch(rng, words="a b c".split(), n=40)
    corpus = base + [s[::-1] for s in base]
    kw = dict(hidden=16, embed=16, epochs=4, seed=2)
    fwd = train_lstm(corpus, LstmConfig.desk(**kw))
    bwd = train_lstm(corpus, LstmConfig.desk(direction="backward", **kw))
    for s in base[:10]:
        a, b = lstm_logprob(fwd, s), lstm_logprob(bwd, s[::-1])
        assert abs(a - b) <= 0.15 * max(abs(a), 1.0)


def test_round_trip_bitwise():
    m = train_lstm(random_batch(random.Random(4), n=20), LstmConfig.desk(hidden=8, embed=8, epochs=1))
    data = m.to_bytes()
    assert data.startswith(b"DFLS1\n")
    back = LstmModel.load(io.BytesIO(data))
    assert back.to_bytes() == data
    s = ["a", "b", "zz"]
    assert lstm_logprob(back, s) == lstm_logprob(m, s)


def test_bad_magic():
    with pytest.raises(ValueError):
        LstmModel.load(io.BytesIO(b"NOPE\n{}\n"))


def test_training_loss_mostly_decreasing():
    from disfluency.synthetic import ToyGrammar
    g = ToyGrammar(0)
    corpus = [g.sentence() for _ in range(150)]
    m = train_lstm(corpus, LstmConfig.desk(hidden=16, embed=16, epochs=13, seed=0))
    inversions = sum(b > a for a, b in zip(m.history, m.history[1:]))
    assert inversions <= 1
    assert m.history[-1] < m.history[0]


def test_max_len_truncates():
    long = ["a"] * 30
    m = train_lstm([long], LstmConfig.desk(hidden=4, embed=4, epochs=1, max_len=5))
    assert m.vocab == build_vocab([["a"]])
