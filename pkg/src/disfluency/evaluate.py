"""Edited-word f-score and error rate.

Only EDITED tokens count; FILLER tokens are ignored on both sides.  The
error rate is (false positives + false negatives) / gold EDITED tokens and
is not clamped, so it can exceed 1.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .corpus import Label


class LengthMismatchError(ValueError):
    pass


@dataclass
class UtteranceScore:
    id: str
    tp: int
    fp: int
    fn: int

    @property
    def error_rate(self) -> float:
        gold = self.tp + self.fn
        if gold == 0:
            return 0.0 if self.fp == 0 else math.inf
        return (self.fp + self.fn) / gold


@dataclass
class EvalReport:
    true_positives: int
    false_positives: int
    false_negatives: int
    per_utterance: list[UtteranceScore] = field(default_factory=list)

    @property
    def gold_edited(self) -> int:
        return self.true_positives + self.false_negatives

    @property
    def precision(self) -> float:
        d = self.true_positives + self.false_positives
        return self.true_positives / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.gold_edited
        return self.true_positives / d if d else 0.0

    @property
    def f_score(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def error_rate(self) -> float:
        errors = self.false_positives + self.false_negatives
        if self.gold_edited == 0:
            return 0.0 if errors == 0 else math.inf
        return errors / self.gold_edited

    def __add__(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.true_positives + other.true_positives,
                          self.false_positives + other.false_positives,
                          self.false_negatives + other.false_negatives,
                          self.per_utterance + other.per_utterance)

    def summary(self) -> dict:
        return {
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "precision": self.precision,
            "recall": self.recall,
            "f_score": self.f_score,
            "error_rate": _finite(self.error_rate),
        }

    def to_json(self, per_utterance: bool = True) -> str:
        d = self.summary()
        if per_utterance:
            d["per_utterance"] = [
                {"id": u.id, "tp": u.tp, "fp": u.fp, "fn": u.fn, "error_rate": _finite(u.error_rate)}
                for u in self.per_utterance
            ]
        return json.dumps(d, indent=1, sort_keys=True)

    def table(self) -> str:
        rows = [("precision", self.precision), ("recall", self.recall),
                ("f-score", self.f_score), ("error rate", self.error_rate)]
        lines = [f"TP {self.true_positives}  FP {self.false_positives}  FN {self.false_negatives}"]
        lines += [f"{name:<11}{value * 100:8.2f}" for name, value in rows]
        return "\n".join(lines)


def _finite(x: float):
    return "inf" if math.isinf(x) else x


def score(predicted: Sequence[Sequence[Label]] | Mapping[str, Sequence[Label]],
          gold: Sequence[Sequence[Label]] | Mapping[str, Sequence[Label]],
          ids: Sequence[str] | None = None) -> EvalReport:
    """Token-level EDITED counts over aligned utterances.

    Accepts parallel sequences of label sequences, or two dicts keyed by
    utterance id (scored over the gold keys in sorted order).
    """
    if isinstance(gold, Mapping):
        keys = sorted(gold)
        if not isinstance(predicted, Mapping) or set(predicted) != set(gold):
            raise LengthMismatchError("predicted and gold cover different utterances")
        predicted = [predicted[k] for k in keys]
        gold = [gold[k] for k in keys]
        ids = keys
    if len(predicted) != len(gold):
        raise LengthMismatchError(f"{len(predicted)} predicted vs {len(gold)} gold utterances")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(gold))]
    per = []
    tp = fp = fn = 0
    for uid, p, g in zip(ids, predicted, gold):
        if len(p) != len(g):
            raise LengthMismatchError(f"utterance {uid}: {len(p)} predicted vs {len(g)} gold labels")
        a = b = c = 0
        for x, y in zip(p, g):
            pe = Label(x) is Label.EDITED
            ge = Label(y) is Label.EDITED
            a += pe and ge
            b += pe and not ge
            c += ge and not pe
        per.append(UtteranceScore(uid, a, b, c))
        tp, fp, fn = tp + a, fp + b, fn + c
    return EvalReport(tp, fp, fn, per)
