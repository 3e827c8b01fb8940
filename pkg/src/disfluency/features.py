"""Reranker feature extraction for candidate analyses.

Model-based scores (LSTM / 4-gram LM scores of the fluent string, NCM
scores) plus boolean surface flags computed from the candidate's labels.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, TextIO

from .channel import Analysis, CandidateList
from .corpus import Label

SCORE_KEYS = ("fwd_lstm", "bwd_lstm", "fwd_4g", "bwd_4g")
NCM_FEATURES = ("ncm_total", "ncm_lm", "ncm_rank", "ncm_gap", "ncm_edits",
                "ncm_lm_channel_edits", "channel")


class MissingScoreError(KeyError):
    pass


FeatureVector = dict  # feature name -> value


@dataclass
class FeatureSpace:
    names: list[str] = field(default_factory=list)
    frozen: bool = False

    def __post_init__(self):
        self._index = {n: i for i, n in enumerate(self.names)}

    def add(self, name: str) -> None:
        if self.frozen:
            raise RuntimeError("feature space is frozen")
        if name not in self._index:
            self._index[name] = len(self.names)
            self.names.append(name)

    def fit(self, vectors: Iterable[Mapping[str, float]]) -> "FeatureSpace":
        for vec in vectors:
            for name in vec:
                self.add(name)
        return self

    def freeze(self) -> "FeatureSpace":
        self.names = sorted(self.names)
        self._index = {n: i for i, n in enumerate(self.names)}
        self.frozen = True
        return self

    def restrict(self, vec: Mapping[str, float]) -> dict[str, float]:
        """Drop names outside the space (unknown test-time features)."""
        return {k: v for k, v in vec.items() if k in self._index}

    def index(self, name: str) -> int:
        return self._index[name]

    def __contains__(self, name) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.names)


# -- surface flags ----------------------------------------------------------

def copy_flags(tokens: Sequence[str], labels: Sequence[Label]) -> set[str]:
    """CopyFlags_X_Y: a length-X copy whose first instance is EDITED, Y words apart.

    The gap counts non-FILLER tokens strictly between the two copies.
    """
    if len(tokens) != len(labels):
        raise ValueError("tokens and labels differ in length")
    n = len(tokens)
    out = set()
    for i in range(n):
        for X in range(1, 4):
            if i + X > n or any(labels[k] is not Label.EDITED for k in range(i, i + X)):
                break
            first = tuple(tokens[i:i + X])
            gap, j = 0, i + X
            while j < n and gap <= 3:
                if labels[j] is Label.FILLER:
                    j += 1
                    continue
                if tuple(tokens[j:j + X]) == first:
                    out.add(f"CopyFlags_{X}_{gap}")
                gap += 1
                j += 1
    return out


def words_flags(tokens: Sequence[str], labels: Sequence[Label]) -> set[str]:
    """WordsFlags_L_n_R for every 3-token window.

    ``n`` counts EDITED tokens inside the window; ``L`` / ``R`` say whether
    the token just left / right of the window is EDITED.
    """
    if len(tokens) != len(labels):
        raise ValueError("tokens and labels differ in length")
    ed = [l is Label.EDITED for l in labels]
    out = set()
    for i in range(len(ed) - 2):
        left = int(i > 0 and ed[i - 1])
        right = int(i + 3 < len(ed) and ed[i + 3])
        out.add(f"WordsFlags_{left}_{sum(ed[i:i + 3])}_{right}")
    return out


def sentence_edge_flags(tokens: Sequence[str], labels: Sequence[Label]) -> set[str]:
    if len(tokens) != len(labels):
        raise ValueError("tokens and labels differ in length")
    out = set()
    n = len(labels)
    run = 0
    while run < n and labels[run] is Label.EDITED:
        run += 1
    if run:
        out.add(f"SentenceEdgeFlags_initial_{min(run, 3)}")
    run = 0
    while run < n and labels[n - 1 - run] is Label.EDITED:
        run += 1
    if run:
        out.add(f"SentenceEdgeFlags_final_{min(run, 3)}")
    return out


def surface_flags(tokens: Sequence[str], labels: Sequence[Label]) -> set[str]:
    return copy_flags(tokens, labels) | words_flags(tokens, labels) | sentence_edge_flags(tokens, labels)


# -- extraction ---------------------------------------------------------------

def extract(candidate: Analysis, scores: Mapping[str, float], required: Iterable[str] = (),
            rank: int = 0, top_total: float | None = None) -> FeatureVector:
    """Feature vector for one candidate.

    ``scores`` maps LM names (``fwd_lstm``, ``bwd_lstm``, ``fwd_4g``,
    ``bwd_4g``) to log-probabilities of the candidate's fluent string; each
    name in ``required`` must be present.  ``rank`` and ``top_total`` place
    the candidate in its n-best list.
    """
    vec: dict[str, float] = {}
    for key in required:
        if key not in scores:
            raise MissingScoreError(f"candidate lacks a {key} score")
    for key in SCORE_KEYS:
        if key in scores:
            vec[key] = float(scores[key])
    top = candidate.ncm_total_logprob if top_total is None else top_total
    vec["ncm_total"] = candidate.ncm_total_logprob
    vec["ncm_lm"] = candidate.ncm_lm_logprob
    vec["ncm_rank"] = float(rank)
    vec["ncm_gap"] = candidate.ncm_total_logprob - top
    vec["ncm_edits"] = float(candidate.n_edits)
    vec["ncm_lm_channel_edits"] = candidate.ncm_lm_logprob + candidate.channel_logprob + candidate.n_edits
    vec["channel"] = candidate.channel_logprob
    for name in sorted(surface_flags(candidate.words, candidate.labels)):
        vec[name] = 1.0
    return vec


def extract_list(cl: CandidateList, scores: Sequence[Mapping[str, float]],
                 required: Iterable[str] = ()) -> list[FeatureVector]:
    required = tuple(required)
    top = cl.candidates[0].ncm_total_logprob if cl.candidates else 0.0
    return [extract(c, s, required, rank=r, top_total=top)
            for r, (c, s) in enumerate(zip(cl.candidates, scores))]


def is_score_feature(name: str) -> bool:
    return name in SCORE_KEYS or name in NCM_FEATURES


def write_features(rows: Iterable[tuple[str, int, Mapping[str, float]]], stream: TextIO) -> None:
    for uid, index, vec in rows:
        stream.write(json.dumps({"id": uid, "candidate_index": index,
                                 "features": dict(sorted(vec.items()))},
                                separators=(",", ":")) + "\n")


def read_features(stream: TextIO) -> list[tuple[str, int, dict[str, float]]]:
    out = []
    for line in stream:
        if line.strip():
            rec = json.loads(line)
            out.append((rec["id"], int(rec["candidate_index"]), rec["features"]))
    return out
