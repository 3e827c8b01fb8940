"""Toy fluent grammar and reference channel parameters for synthetic corpora.

Sentences carry two kinds of long-range structure a bigram model cannot
see: subject-verb number agreement across relative clauses and
prepositional phrases, and a per-sentence topic that constrains every
noun and verb.
"""
from __future__ import annotations

import random
from collections import defaultdict

from .channel import EPS, OPS, ChannelModel
from .corpus import DEFAULT_FILLERS, Utterance, synthesize_corpus

TOPICS = {
    "travel": {
        "n": ["flight", "ticket", "train", "hotel", "city", "airport"],
        "v": ["book", "need", "miss", "find", "take"],
        "adj": ["cheap", "early", "late"],
    },
    "animals": {
        "n": ["dog", "cat", "horse", "bird", "farmer", "fox"],
        "v": ["chase", "feed", "watch", "follow", "hear"],
        "adj": ["small", "wild", "old"],
    },
    "food": {
        "n": ["cake", "pizza", "cook", "salad", "kitchen", "dinner"],
        "v": ["bake", "eat", "order", "cook", "taste"],
        "adj": ["fresh", "hot", "sweet"],
    },
}
DET = {"sg": ["a", "the", "this", "every"], "pl": ["the", "these", "some", "many", "two"]}
PREP = ["near", "with", "from", "behind"]
SUBJ_PRON = {"sg": ["he", "she"], "pl": ["we", "they"]}
AUX = {"sg": "does", "pl": "do"}
OPENERS = [["i", "think"], ["maybe"], ["so"], ["and", "then"]]


def plural(noun: str) -> str:
    if noun.endswith(("s", "x", "ch")):
        return noun + "es"
    if noun.endswith("y"):
        return noun[:-1] + "ies"
    return noun + "s"


def verb_form(verb: str, number: str) -> str:
    return plural(verb) if number == "sg" else verb


class ToyGrammar:
    def __init__(self, seed: int = 0, topics=TOPICS):
        self.rng = random.Random(seed)
        self.topics = topics

    def _np(self, topic: str, number: str, depth: int) -> list[str]:
        r = self.rng
        t = self.topics[topic]
        words = [r.choice(DET[number])]
        if r.random() < 0.3:
            words.append(r.choice(t["adj"]))
        noun = r.choice(t["n"])
        words.append(noun if number == "sg" else plural(noun))
        if depth == 0 and r.random() < 0.35:
            inner = r.choice(["sg", "pl"])
            words += [r.choice(PREP)] + self._np(topic, inner, depth + 1)
        elif depth == 0 and r.random() < 0.25:
            inner = r.choice(["sg", "pl"])
            words += ["that", verb_form(r.choice(t["v"]), number)] + self._np(topic, inner, depth + 1)
        return words

    def sentence(self) -> list[str]:
        r = self.rng
        topic = r.choice(sorted(self.topics))
        t = self.topics[topic]
        number = r.choice(["sg", "pl"])
        words: list[str] = []
        if r.random() < 0.25:
            words += r.choice(OPENERS)
        if r.random() < 0.3:
            words.append(r.choice(SUBJ_PRON[number]))
        else:
            words += self._np(topic, number, 0)
        if r.random() < 0.25:
            words += [AUX[number], "not", r.choice(t["v"])]
        else:
            words.append(verb_form(r.choice(t["v"]), number))
        words += self._np(topic, r.choice(["sg", "pl"]), 1)
        if r.random() < 0.3:
            words += [r.choice(PREP)] + self._np(topic, r.choice(["sg", "pl"]), 1)
        return words

    def vocabulary(self) -> list[str]:
        words = set(DET["sg"] + DET["pl"] + PREP + ["that", "not"] + list(AUX.values()))
        for ws in SUBJ_PRON.values():
            words.update(ws)
        for ws in OPENERS:
            words.update(ws)
        for t in self.topics.values():
            words.update(t["adj"])
            for n in t["n"]:
                words.update([n, plural(n)])
            for v in t["v"]:
                words.update([v, plural(v)])
        return sorted(words)


def word_classes(topics=TOPICS) -> dict[str, list[str]]:
    """Substitution classes: words of the same part of speech (any topic)."""
    classes: dict[str, list[str]] = defaultdict(list)
    for t in topics.values():
        for n in t["n"]:
            classes["n_sg"].append(n)
            classes["n_pl"].append(plural(n))
        for v in t["v"]:
            classes["v_pl"].append(v)
            classes["v_sg"].append(plural(v))
        classes["adj"] += t["adj"]
    classes["det"] = sorted(set(DET["sg"] + DET["pl"]))
    classes["prep"] = list(PREP)
    classes["pron"] = SUBJ_PRON["sg"] + SUBJ_PRON["pl"]
    return {k: sorted(set(v)) for k, v in classes.items()}


REFERENCE_OPS = {
    "START": {"COPY": 0.6, "SUBSTITUTE": 0.2, "INSERT": 0.15, "DELETE": 0.05},
    "COPY": {"COPY": 0.7, "SUBSTITUTE": 0.15, "INSERT": 0.1, "DELETE": 0.05},
    "SUBSTITUTE": {"COPY": 0.5, "SUBSTITUTE": 0.3, "INSERT": 0.15, "DELETE": 0.05},
    "INSERT": {"COPY": 0.2, "SUBSTITUTE": 0.1, "INSERT": 0.6, "DELETE": 0.1},
    "DELETE": {"COPY": 0.6, "SUBSTITUTE": 0.2, "INSERT": 0.1, "DELETE": 0.1},
}

# Deletions are nearly absent here.  An adjacent DELETE/INSERT pair yields
# the same strings in either order, so with frequent deletions the op table
# is not identifiable from (reparandum, repair) pairs.
IDENTIFIABLE_OPS = {
    "START": {"COPY": 0.6, "SUBSTITUTE": 0.2, "INSERT": 0.19, "DELETE": 0.01},
    "COPY": {"COPY": 0.7, "SUBSTITUTE": 0.15, "INSERT": 0.14, "DELETE": 0.01},
    "SUBSTITUTE": {"COPY": 0.5, "SUBSTITUTE": 0.3, "INSERT": 0.19, "DELETE": 0.01},
    "INSERT": {"COPY": 0.25, "SUBSTITUTE": 0.1, "INSERT": 0.64, "DELETE": 0.01},
    "DELETE": {"COPY": 0.7, "SUBSTITUTE": 0.19, "INSERT": 0.01, "DELETE": 0.1},
}


def reference_channel(vocab: list[str], p_stop: float = 0.55, p_start: float = 0.05,
                      weight: int = 50, p_op=None) -> ChannelModel:
    """Known channel parameters used to inject synthetic disfluencies.

    Substitutions stay within a word class; insertions favour function words.
    """
    p_op = {k: dict(v) for k, v in (p_op or REFERENCE_OPS).items()}
    assert set(p_op["START"]) == {o.value for o in OPS}
    vocab_set = set(vocab)
    subs: dict[str, dict[str, int]] = defaultdict(dict)
    for members in word_classes().values():
        members = [m for m in members if m in vocab_set]
        for m in members:
            for w in members:
                if w != m:
                    subs[m][w] = weight
    for w in DET["sg"] + DET["pl"] + PREP + SUBJ_PRON["sg"] + SUBJ_PRON["pl"] + ["i", "and", "so"]:
        if w in vocab_set:
            subs[EPS][w] = weight
    return ChannelModel(p_op, dict(subs), tuple(vocab), p_start, p_stop, alpha=0.1,
                        fillers=DEFAULT_FILLERS)


def fluent_corpus(n: int, seed: int = 0, prefix: str = "s") -> list[Utterance]:
    g = ToyGrammar(seed)
    return [Utterance.from_words(f"{prefix}{i:06d}", g.sentence()) for i in range(n)]


def synthetic_corpus(n: int, rate: float = 0.15, seed: int = 0,
                     interregnum_prob: float = 0.3, p_op=None,
                     min_repair: int = 1) -> tuple[list[Utterance], ChannelModel]:
    """``n`` labelled disfluent utterances and the channel that generated them."""
    fluent = fluent_corpus(n, seed)
    truth = reference_channel(ToyGrammar(seed).vocabulary(), p_op=p_op)
    return synthesize_corpus(fluent, truth, rate, seed + 1, interregnum_prob,
                             min_repair=min_repair), truth
