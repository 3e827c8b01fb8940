"""Interpolated Kneser-Ney n-gram language models.

One absolute discount per order, estimated from count-of-counts as
``n1 / (n1 + 2 n2)``.  The top order uses raw counts, lower orders use
continuation counts (number of distinct left extensions), and the unigram
level interpolates with a uniform distribution over the vocabulary so that
every word, including ``<unk>``, gets non-zero mass.
"""
from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
MAGIC = b"DFNG1"
FALLBACK_DISCOUNT = 0.5


class EmptyCorpusError(ValueError):
    pass


def _sentences(corpus) -> list[tuple[str, ...]]:
    out = []
    for item in corpus:
        if hasattr(item, "tokens"):
            item = item.fluent_words() if getattr(item, "gold", None) is not None else item.words
        out.append(tuple(item))
    return out


@dataclass
class NgramModel:
    order: int
    vocab: tuple[str, ...]
    discounts: tuple[float, ...]
    # counts[k-1][context][word] for level k; raw at the top, continuation below
    counts: list[dict[tuple[str, ...], dict[str, int]]]
    min_count: int = 1
    _totals: list[dict] = field(default=None, init=False, repr=False, compare=False)
    _types: list[dict] = field(default=None, init=False, repr=False, compare=False)
    _vocab_set: frozenset = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError(f"order must be >= 1, got {self.order}")
        self._totals = [{h: sum(ws.values()) for h, ws in level.items()} for level in self.counts]
        self._types = [{h: len(ws) for h, ws in level.items()} for level in self.counts]
        self._vocab_set = frozenset(self.vocab)

    # -- scoring -------------------------------------------------------
    def map_word(self, w: str) -> str:
        return w if w in self._vocab_set or w == BOS else UNK

    def _prob(self, word: str, context: tuple[str, ...]) -> float:
        p = 1.0 / len(self.vocab)
        for k in range(1, len(context) + 2):
            h = context[len(context) - k + 1:] if k > 1 else ()
            level = self.counts[k - 1]
            ws = level.get(h)
            if not ws:
                continue
            d = self.discounts[k - 1]
            tot = self._totals[k - 1][h]
            c = ws.get(word, 0)
            p = max(c - d, 0.0) / tot + d * self._types[k - 1][h] / tot * p
        return p

    def cond_logprob(self, word: str, context: Sequence[str]) -> float:
        """log p(word | context); only the last ``order - 1`` context words matter."""
        n = self.order - 1
        ctx = tuple(self.map_word(w) for w in context)[-n:] if n else ()
        if len(ctx) < n:
            ctx = (BOS,) * (n - len(ctx)) + ctx
        return math.log(self._prob(self.map_word(word), ctx))

    def logprob(self, sentence: Sequence[str]) -> float:
        lp = 0.0
        hist = [BOS] * (self.order - 1)
        for w in list(sentence) + [EOS]:
            lp += self.cond_logprob(w, hist)
            if self.order > 1:
                hist = hist[1:] + [w]
        return lp

    def distribution(self, context: Sequence[str]) -> dict[str, float]:
        return {w: math.exp(self.cond_logprob(w, context)) for w in self.vocab}

    # -- persistence ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "min_count": self.min_count,
            "vocab": list(self.vocab),
            "discounts": list(self.discounts),
            "counts": [
                [[list(h), w, c] for h in sorted(level) for w, c in sorted(level[h].items())]
                for level in self.counts
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NgramModel":
        counts = []
        for rows in d["counts"]:
            level: dict = defaultdict(dict)
            for h, w, c in rows:
                level[tuple(h)][w] = int(c)
            counts.append(dict(level))
        return cls(int(d["order"]), tuple(d["vocab"]), tuple(float(x) for x in d["discounts"]),
                   counts, int(d.get("min_count", 1)))

    def save(self, f: BinaryIO) -> None:
        f.write(MAGIC + b"\n")
        f.write(json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")

    @classmethod
    def load(cls, f: BinaryIO) -> "NgramModel":
        head = f.readline().rstrip(b"\n")
        if head != MAGIC:
            raise ValueError(f"not an n-gram model file (magic {head!r})")
        return cls.from_dict(json.loads(f.read().decode("utf-8")))


def kn_discount(count_values: Iterable[int]) -> float:
    coc = Counter(count_values)
    n1, n2 = coc.get(1, 0), coc.get(2, 0)
    if n1 == 0:
        return FALLBACK_DISCOUNT
    return n1 / (n1 + 2 * n2)


def train_ngram(corpus, order: int, min_count: int = 1) -> NgramModel:
    """Estimate an interpolated Kneser-Ney model.

    ``corpus`` holds token sequences or :class:`~disfluency.corpus.Utterance`
    objects (labelled utterances contribute their fluent words only).  Words
    seen fewer than ``min_count`` times become ``<unk>``.
    """
    if not 1 <= order <= 5:
        raise ValueError(f"order must be in 1..5, got {order}")
    sents = _sentences(corpus)
    if not sents:
        raise EmptyCorpusError("cannot train an n-gram model on an empty corpus")
    freq = Counter(w for s in sents for w in s)
    known = {w for w, c in freq.items() if c >= min_count}
    vocab = tuple(sorted(known | {UNK, EOS}))

    top: dict = defaultdict(Counter)
    for s in sents:
        padded = [BOS] * (order - 1) + [w if w in known else UNK for w in s] + [EOS]
        for i in range(order - 1, len(padded)):
            top[tuple(padded[i - order + 1:i])][padded[i]] += 1

    levels = [None] * order
    levels[order - 1] = {h: dict(ws) for h, ws in top.items()}
    # continuation counts: distinct left extensions of each lower-order n-gram
    for k in range(order - 1, 0, -1):
        left: dict = defaultdict(set)
        for h, ws in levels[k].items():
            for w in ws:
                left[(h[1:], w)].add(h[0])
        level: dict = defaultdict(dict)
        for (h, w), vs in left.items():
            level[h][w] = len(vs)
        levels[k - 1] = dict(level)

    discounts = tuple(kn_discount(c for ws in lv.values() for c in ws.values()) for lv in levels)
    return NgramModel(order, vocab, discounts, levels, min_count)


def reversed_sentences(corpus) -> list[tuple[str, ...]]:
    return [tuple(reversed(s)) for s in _sentences(corpus)]
