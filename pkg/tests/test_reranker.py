import io
import random

import numpy as np
import pytest

from conftest import gradient_error, random_instances, separable_instances
from disfluency.channel import Analysis, CandidateList
from disfluency.corpus import E, O, Utterance
from disfluency.reranker import (
    DegenerateInstanceError, EmptyCandidateListError, RerankerModel, TrainingInstance, objective,
    posterior, predict, select, standardization, train_reranker, tune_lambda, zero_model,
)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = random.Random(seed)
    assert gradient_error(random_instances(rng), 10 ** rng.uniform(-4, -1), rng) < 1e-5


def test_separable_set_reaches_oracle():
    insts = separable_instances(random.Random(0))
    model = train_reranker(insts, l2_lambda=1e-4)
    for inst in insts:
        k = select(model, inst.features)
        assert inst.correct[k] == 2 and inst.predicted[k] == 2


def test_huge_lambda_gives_uniform_posterior():
    insts = random_instances(random.Random(1))
    model = train_reranker(insts, l2_lambda=1e6)
    assert np.abs(model.w).max() < 1e-5
    p = posterior(model, insts[0])
    assert np.allclose(p, 1 / len(p), atol=1e-5)


def test_posterior_properties():
    insts = random_instances(random.Random(2), n_inst=10)
    model = train_reranker(insts, l2_lambda=1e-3, iterations=30)
    for inst in insts:
        p = posterior(model, inst)
        assert p.sum() == pytest.approx(1.0, abs=1e-9)
        shifted = [dict(v, f0=v.get("f0", 0.0) + 3.0) for v in inst.features]
        assert select(model, shifted) == select(model, inst.features)
    zero = zero_model(model.feature_space)
    p = posterior(zero, insts[0])
    assert np.allclose(p, 1 / len(p))
    one = TrainingInstance([{"f0": 1.0}], [0], [0], 0)
    assert posterior(model, one).tolist() == [1.0]


def test_training_never_worse_than_zero_weights():
    for seed in range(5):
        insts = random_instances(random.Random(seed))
        if not any(i.gold_edits or i.predicted.any() for i in insts):
            continue
        model = train_reranker(insts, l2_lambda=1e-2, iterations=50)
        trained = objective(model, insts, model.l2_lambda)[0]
        zero = objective(np.zeros(len(model.feature_space)), insts, model.l2_lambda,
                         model.feature_space, model.means, model.scales)[0]
        assert trained >= zero
        assert 0.0 <= trained + model.l2_lambda * float(model.w @ model.w) <= 1.0


def test_degenerate_instances():
    with pytest.raises(DegenerateInstanceError):
        train_reranker([])
    with pytest.raises(DegenerateInstanceError):
        train_reranker([TrainingInstance([{"a": 1.0}], [0], [0], 0)])
    with pytest.raises(DegenerateInstanceError):
        TrainingInstance([], [], [], 1)


def test_standardization_drops_constant_scores():
    insts = [TrainingInstance([{"fwd_lstm": -3.0, "x": 1.0}, {"fwd_lstm": -3.0}], [1, 0], [1, 1], 1)]
    space, means, scales = standardization(insts)
    assert "fwd_lstm" not in space and "x" in space


def _cl(n):
    u = Utterance.from_words("u", ["a", "a"])
    cands = [Analysis("u", ("a", "a"), (O, O), ("a", "a"), (), -1.0, -2.0, -3.0 - i, 0) for i in range(n)]
    return CandidateList(u, tuple(cands), n)


def test_predict_tie_break_and_edge_cases():
    cl = _cl(3)
    assert predict(zero_model(), cl) is cl.candidates[0]
    single = _cl(1)
    assert predict(zero_model(), single) == single.candidates[0]
    with pytest.raises(EmptyCandidateListError):
        predict(zero_model(), _cl(0))
    with pytest.raises(EmptyCandidateListError):
        select(zero_model(), [])


def test_model_round_trip():
    insts = random_instances(random.Random(3))
    model = train_reranker(insts, iterations=20)
    buf = io.BytesIO()
    model.save(buf)
    assert buf.getvalue().startswith(b"DFRR1\n")
    buf.seek(0)
    back = RerankerModel.load(buf)
    assert back.to_dict() == model.to_dict()
    with pytest.raises(ValueError):
        RerankerModel.load(io.BytesIO(b"XXXX\n{}"))


def test_tune_lambda_picks_from_grid():
    rng = random.Random(4)
    model, lam, table = tune_lambda(separable_instances(rng, 20), separable_instances(rng, 10),
                                    iterations=30)
    assert lam in (1e-4, 1e-3, 1e-2)
    assert [t[0] for t in table] == [1e-4, 1e-3, 1e-2]


def test_training_is_deterministic():
    insts = random_instances(random.Random(6))
    assert train_reranker(insts).to_dict() == train_reranker(insts).to_dict()
