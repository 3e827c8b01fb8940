"""Log-linear n-best reranker trained on an expected f-score objective.

For weights ``w`` the posterior over an instance's candidates is
``p(c) ∝ exp(w · φ(c))``.  Training maximises

    EF(w) - λ ||w||²,   EF = 2 Σ p(c) g_c / (Σ p(c) e_c + G)

with sums over all candidates of all instances, ``g_c`` the correctly
predicted EDITED tokens of candidate ``c``, ``e_c`` its predicted EDITED
tokens and ``G`` the total number of gold EDITED tokens.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Mapping, Sequence

import numpy as np

from .channel import Analysis, CandidateList
from .corpus import Label
from .features import FeatureSpace, extract_list, is_score_feature

MAGIC = b"DFRR1"


class DegenerateInstanceError(ValueError):
    pass


class EmptyCandidateListError(ValueError):
    pass


@dataclass
class TrainingInstance:
    features: list[dict[str, float]]
    correct: np.ndarray      # g_c
    predicted: np.ndarray    # e_c
    gold_edits: int
    uid: str = ""

    def __post_init__(self):
        self.correct = np.asarray(self.correct, dtype=float)
        self.predicted = np.asarray(self.predicted, dtype=float)
        if not self.features:
            raise DegenerateInstanceError(f"instance {self.uid!r} has no candidates")
        if not (len(self.features) == len(self.correct) == len(self.predicted)):
            raise ValueError("per-candidate statistics do not line up with the features")
        if np.any(self.correct > self.predicted) or np.any(self.correct > self.gold_edits):
            raise ValueError("correct-edit counts exceed predicted or gold counts")


def edit_stats(labels: Sequence[Label], gold: Sequence[Label]) -> tuple[int, int]:
    """(correct EDITED, predicted EDITED) for one labelling against gold."""
    if len(labels) != len(gold):
        raise ValueError("label length mismatch")
    pred = [l is Label.EDITED for l in labels]
    ref = [g is Label.EDITED for g in gold]
    return sum(p and r for p, r in zip(pred, ref)), sum(pred)


def make_instance(cl: CandidateList, features: list[dict[str, float]],
                  gold: Sequence[Label] | None = None) -> TrainingInstance:
    gold = cl.utterance.gold if gold is None else gold
    if gold is None:
        raise DegenerateInstanceError(f"utterance {cl.utterance.id} has no gold labels")
    stats = [edit_stats(c.labels, gold) for c in cl.candidates]
    return TrainingInstance(features, [s[0] for s in stats], [s[1] for s in stats],
                            sum(g is Label.EDITED for g in gold), cl.utterance.id)


@dataclass
class RerankerModel:
    weights: dict[str, float]
    l2_lambda: float
    feature_space: FeatureSpace
    means: dict[str, float] = field(default_factory=dict)
    scales: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")
        if not all(np.isfinite(v) for v in self.weights.values()):
            raise FloatingPointError("non-finite weight")

    @property
    def w(self) -> np.ndarray:
        return np.array([self.weights.get(n, 0.0) for n in self.feature_space.names])

    def matrix(self, vectors: Sequence[Mapping[str, float]]) -> np.ndarray:
        return design_matrix(vectors, self.feature_space, self.means, self.scales)

    def to_dict(self) -> dict:
        return {
            "names": list(self.feature_space.names),
            "weights": [self.weights.get(n, 0.0) for n in self.feature_space.names],
            "means": dict(sorted(self.means.items())),
            "scales": dict(sorted(self.scales.items())),
            "l2_lambda": self.l2_lambda,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RerankerModel":
        space = FeatureSpace(list(d["names"]), frozen=True)
        return cls(dict(zip(d["names"], d["weights"])), d["l2_lambda"], space,
                   dict(d["means"]), dict(d["scales"]))

    def save(self, f: BinaryIO) -> None:
        f.write(MAGIC + b"\n")
        f.write(json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")

    @classmethod
    def load(cls, f: BinaryIO) -> "RerankerModel":
        head = f.readline().rstrip(b"\n")
        if head != MAGIC:
            raise ValueError(f"not a reranker model file (magic {head!r})")
        return cls.from_dict(json.loads(f.read().decode("utf-8")))


def design_matrix(vectors: Sequence[Mapping[str, float]], space: FeatureSpace,
                  means: Mapping[str, float], scales: Mapping[str, float]) -> np.ndarray:
    X = np.zeros((len(vectors), len(space)))
    for r, vec in enumerate(vectors):
        for name, value in vec.items():
            if name in space:
                X[r, space.index(name)] = (value - means.get(name, 0.0)) / scales.get(name, 1.0)
    return X


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = np.exp(scores - scores.max())
    return z / z.sum()


def posterior(model: RerankerModel, instance: TrainingInstance | Sequence[Mapping[str, float]]) -> np.ndarray:
    vectors = instance.features if isinstance(instance, TrainingInstance) else instance
    return _softmax(model.matrix(vectors) @ model.w)


# -- objective ------------------------------------------------------------------

@dataclass
class _Problem:
    X: list[np.ndarray]
    g: list[np.ndarray]
    e: list[np.ndarray]
    G: float
    lam: float

    def value_and_grad(self, w: np.ndarray) -> tuple[float, np.ndarray]:
        A = 0.0
        Bsum = self.G
        dA = np.zeros_like(w)
        dB = np.zeros_like(w)
        for X, g, e in zip(self.X, self.g, self.e):
            p = _softmax(X @ w)
            centred = X - p @ X
            A += p @ g
            Bsum += p @ e
            dA += (p * g) @ centred
            dB += (p * e) @ centred
        ef = 2.0 * A / Bsum
        grad = 2.0 * (dA * Bsum - A * dB) / (Bsum * Bsum)
        return ef - self.lam * float(w @ w), grad - 2.0 * self.lam * w

    def expected_f(self, w: np.ndarray) -> float:
        return self.value_and_grad(w)[0] + self.lam * float(w @ w)


def objective(model_or_w, instances: Sequence[TrainingInstance], l2_lambda: float,
              space: FeatureSpace | None = None, means=None, scales=None) -> tuple[float, np.ndarray]:
    """Regularised expected f-score and its gradient at the given weights."""
    if isinstance(model_or_w, RerankerModel):
        space, means, scales = model_or_w.feature_space, model_or_w.means, model_or_w.scales
        w = model_or_w.w
    else:
        w = np.asarray(model_or_w, dtype=float)
    return _problem(instances, space, means or {}, scales or {}, l2_lambda).value_and_grad(w)


def _problem(instances, space, means, scales, lam) -> _Problem:
    G = float(sum(inst.gold_edits for inst in instances))
    return _Problem([design_matrix(inst.features, space, means, scales) for inst in instances],
                    [inst.correct for inst in instances], [inst.predicted for inst in instances],
                    G, lam)


def standardization(instances: Sequence[TrainingInstance]) -> tuple[FeatureSpace, dict, dict]:
    """Feature space plus per-feature centring/scaling for score features.

    Score features with zero variance over the training candidates are dropped.
    """
    space = FeatureSpace().fit(v for inst in instances for v in inst.features)
    means, scales, drop = {}, {}, set()
    for name in space.names:
        if not is_score_feature(name):
            continue
        vals = np.array([v.get(name, 0.0) for inst in instances for v in inst.features])
        sd = float(vals.std())
        if sd < 1e-12:
            drop.add(name)
        else:
            means[name], scales[name] = float(vals.mean()), sd
    kept = FeatureSpace([n for n in space.names if n not in drop]).freeze()
    return kept, means, scales


def train_reranker(instances: Sequence[TrainingInstance], l2_lambda: float = 1e-3,
                   iterations: int = 200, tol: float = 1e-10) -> RerankerModel:
    """Full-batch gradient ascent with backtracking line search from zero weights."""
    instances = list(instances)
    if not instances:
        raise DegenerateInstanceError("no training instances")
    if sum(inst.gold_edits for inst in instances) == 0 and all(
            not inst.predicted.any() for inst in instances):
        raise DegenerateInstanceError("no gold or predicted edits anywhere; f-score undefined")
    space, means, scales = standardization(instances)
    prob = _problem(instances, space, means, scales, l2_lambda)
    w = np.zeros(len(space))
    val, grad = prob.value_and_grad(w)
    step = 1.0
    for _ in range(iterations):
        gg = float(grad @ grad)
        if gg < tol * tol:
            break
        while step > 1e-12:
            w_new = w + step * grad
            v_new, g_new = prob.value_and_grad(w_new)
            if v_new >= val + 1e-4 * step * gg:
                break
            step *= 0.5
        else:
            break
        w, val, grad = w_new, v_new, g_new
        step *= 2.0
    weights = {n: float(x) for n, x in zip(space.names, w)}
    return RerankerModel(weights, l2_lambda, space, means, scales)


# -- prediction ---------------------------------------------------------------

def select(model: RerankerModel, vectors: Sequence[Mapping[str, float]]) -> int:
    """Index of the highest-posterior candidate; ties go to the better NCM rank."""
    if not vectors:
        raise EmptyCandidateListError("empty candidate list")
    s = model.matrix(vectors) @ model.w
    return int(np.flatnonzero(s == s.max())[0])


def predict(model: RerankerModel, candidate_list: CandidateList,
            scores: Sequence[Mapping[str, float]] | None = None) -> Analysis:
    if not candidate_list.candidates:
        raise EmptyCandidateListError(f"no candidates for {candidate_list.utterance.id}")
    scores = scores if scores is not None else [{} for _ in candidate_list.candidates]
    vectors = extract_list(candidate_list, scores)
    return candidate_list.candidates[select(model, vectors)]


def zero_model(space: FeatureSpace | None = None) -> RerankerModel:
    space = space or FeatureSpace([], frozen=True)
    return RerankerModel({n: 0.0 for n in space.names}, 0.0, space)


def tune_lambda(train: Sequence[TrainingInstance], dev: Sequence[TrainingInstance],
                grid: Iterable[float] = (1e-4, 1e-3, 1e-2), iterations: int = 200):
    """Pick λ by dev-set f-score of the selected candidates.  Returns (model, λ, table)."""
    best = None
    table = []
    for lam in grid:
        model = train_reranker(train, lam, iterations)
        tp = pp = gg = 0.0
        for inst in dev:
            k = select(model, inst.features)
            tp += inst.correct[k]
            pp += inst.predicted[k]
            gg += inst.gold_edits
        f = 2 * tp / (pp + gg) if pp + gg else 0.0
        table.append((lam, f))
        if best is None or f > best[1]:
            best = (model, f, lam)
    return best[0], best[2], table
