"""Noisy-channel disfluency model and n-best candidate search.

The channel walks the observed utterance left to right.  At every position
that is neither a filler nor inside a reparandum it decides whether a
repair starts there (``p_start``).  A reparandum is generated by a
first-order Markov chain of alignment operations against the words that
follow it (the repair): COPY and SUBSTITUTE emit a reparandum word for the
next repair word, INSERT emits a reparandum word with no repair
counterpart, DELETE skips a repair word.  After every operation the chain
stops with probability ``p_stop``.  Filler tokens cost a fixed
``p_filler`` each; the fillers directly after a reparandum form its
interregnum.

A candidate analysis is identified by its label sequence: maximal EDITED
runs are the reparanda, so every label sequence has exactly one region
structure and the n-best search can enumerate label sequences without
duplicates.  The alignment of each region is the Viterbi alignment.
"""
from __future__ import annotations

import enum
import itertools
import json
import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence, TextIO

from .corpus import DEFAULT_FILLERS, Label, Utterance, filler_mask

EPS = "<eps>"
UNK = "<unk>"
MAGIC = b"DFCH1"
# the repair window holds at most this many words beyond the reparandum length
REPAIR_SLACK = 2
BRUTE_FORCE_MAX = 12


class Op(str, enum.Enum):
    COPY = "COPY"
    SUBSTITUTE = "SUBSTITUTE"
    INSERT = "INSERT"
    DELETE = "DELETE"


OPS = tuple(Op)
START = "START"
PREV_STATES = (START,) + tuple(o.value for o in OPS)


class NoRepairsError(ValueError):
    pass


class MalformedSpanError(ValueError):
    pass


class InputTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class AlignOp:
    kind: Op
    reparandum_word: str | None = None
    repair_word: str | None = None

    def __post_init__(self):
        k = self.kind
        if k in (Op.COPY, Op.SUBSTITUTE):
            if self.reparandum_word is None or self.repair_word is None:
                raise ValueError(f"{k.value} needs both words")
            if (k is Op.COPY) != (self.reparandum_word == self.repair_word):
                raise ValueError(f"{k.value} with words {self.reparandum_word!r}/{self.repair_word!r}")
        elif k is Op.INSERT:
            if self.reparandum_word is None or self.repair_word is not None:
                raise ValueError("INSERT carries a reparandum word only")
        elif self.repair_word is None or self.reparandum_word is not None:
            raise ValueError("DELETE carries a repair word only")


@dataclass(frozen=True)
class RepairRegion:
    reparandum_span: tuple[int, int]
    interregnum_span: tuple[int, int]
    repair_span: tuple[int, int]
    alignment: tuple[AlignOp, ...] = ()

    def __post_init__(self):
        (a, b), (c, d), (e, f) = self.reparandum_span, self.interregnum_span, self.repair_span
        if not (a < b <= c <= d <= e <= f):
            raise MalformedSpanError(
                f"spans out of order: {self.reparandum_span} {self.interregnum_span} {self.repair_span}")
        if b != c or d != e:
            raise MalformedSpanError("reparandum, interregnum and repair must be adjacent")
        if self.alignment:
            n_rep = sum(op.kind is not Op.DELETE for op in self.alignment)
            n_fix = sum(op.kind is not Op.INSERT for op in self.alignment)
            if n_rep != b - a or n_fix != f - e:
                raise MalformedSpanError("alignment does not cover reparandum and repair")


@dataclass(frozen=True)
class Analysis:
    utterance_id: str
    words: tuple[str, ...]
    labels: tuple[Label, ...]
    fluent: tuple[str, ...]
    repairs: tuple[RepairRegion, ...]
    channel_logprob: float
    ncm_lm_logprob: float
    ncm_total_logprob: float
    n_edits: int

    @property
    def label_string(self) -> str:
        return "".join(l.value for l in self.labels)

    def is_all_fluent(self) -> bool:
        return self.n_edits == 0


@dataclass(frozen=True)
class CandidateList:
    utterance: Utterance
    candidates: tuple[Analysis, ...]
    n: int

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __getitem__(self, i):
        return self.candidates[i]

    def label_strings(self) -> list[str]:
        return [c.label_string for c in self.candidates]


# -- the model ----------------------------------------------------------------

@dataclass
class ChannelModel:
    """Parameters of the channel.

    ``p_op[prev][kind]`` is the operation transition table (``prev`` is
    ``"START"`` or an op name).  Substitution and insertion emissions share
    ``sub_counts[m][w]``: the count of reparandum word ``w`` generated for
    repair word ``m`` (``m = "<eps>"`` for INSERT), smoothed add-``alpha``
    over ``vocab`` plus ``<unk>``.
    """
    p_op: dict[str, dict[str, float]]
    sub_counts: dict[str, dict[str, float]]
    vocab: tuple[str, ...]
    p_start: float
    p_stop: float
    p_filler: float = 0.5
    alpha: float = 0.1
    fillers: tuple[tuple[str, ...], ...] = DEFAULT_FILLERS
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.vocab = tuple(sorted(set(self.vocab) - {UNK}))
        self.fillers = tuple(tuple(p) for p in self.fillers)
        self._vocab_set = frozenset(self.vocab)
        self._sub_tot = {m: sum(ws.values()) for m, ws in self.sub_counts.items()}
        self._log_op = {prev: {k: math.log(p) for k, p in row.items()}
                        for prev, row in self.p_op.items()}
        self.log_start = math.log(self.p_start)
        self.log_no_start = math.log1p(-self.p_start)
        self.log_stop = math.log(self.p_stop)
        self.log_go = math.log1p(-self.p_stop)
        self.log_filler = math.log(self.p_filler)
        self.validate()

    def validate(self) -> None:
        for name in ("p_start", "p_stop", "p_filler"):
            p = getattr(self, name)
            if not 0.0 < p < 1.0:
                raise ValueError(f"{name}={p} outside (0, 1)")
        for prev in PREV_STATES:
            row = self.p_op.get(prev)
            if row is None or set(row) != {o.value for o in OPS}:
                raise ValueError(f"p_op row {prev!r} incomplete")
            if abs(sum(row.values()) - 1.0) > 1e-9:
                raise ValueError(f"p_op row {prev!r} sums to {sum(row.values())}")
            if any(not 0.0 < p < 1.0 for p in row.values()):
                raise ValueError(f"p_op row {prev!r} has a probability outside (0, 1)")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        for m, ws in self.sub_counts.items():
            if UNK in ws:
                continue
            if any(w not in self._vocab_set for w in ws):
                raise ValueError(f"substitution counts for {m!r} use words outside the vocabulary")

    # -- component probabilities -----------------------------------------
    def op_logprob(self, kind: Op | str, prev: Op | str) -> float:
        return self._log_op[getattr(prev, "value", prev)][getattr(kind, "value", kind)]

    def _key(self, w: str) -> str:
        return w if w in self._vocab_set else UNK

    def sub_prob(self, w: str, m: str) -> float:
        """p(reparandum word ``w`` | repair word ``m``); ``m = "<eps>"`` for insertions."""
        m = m if m == EPS else self._key(m)
        c = self.sub_counts.get(m, {}).get(self._key(w), 0)
        tot = self._sub_tot.get(m, 0)
        return (c + self.alpha) / (tot + self.alpha * (len(self.vocab) + 1))

    def sub_logprob(self, w: str, m: str) -> float:
        return math.log(self.sub_prob(w, m))

    def emission_outcomes(self) -> list[str]:
        return list(self.vocab) + [UNK]

    # -- alignment ---------------------------------------------------------
    def align(self, reparandum: Sequence[str], repair: Sequence[str]):
        """Viterbi alignment of ``reparandum`` against a prefix of ``repair``.

        Returns ``(logprob, ops)``; the log-probability includes the op chain,
        emissions, continuation and the final stop, but not ``p_start``.
        """
        key = (tuple(reparandum), tuple(repair))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        res = _viterbi_align(self, key[0], key[1])
        self._cache[key] = res
        return res

    def region_logprob(self, reparandum: Sequence[str], repair: Sequence[str],
                       n_interregnum: int) -> float:
        """Channel log-probability of one repair region, start decision included."""
        t = self.log_start
        t += self.align(reparandum, repair[:len(reparandum) + REPAIR_SLACK])[0]
        for _ in range(n_interregnum):
            t += self.log_filler
        return t

    # -- sampling ----------------------------------------------------------
    def _draw(self, rng: random.Random, weights: dict) -> str:
        items = sorted(weights.items())
        total = sum(p for _, p in items)
        x = rng.random() * total
        for k, p in items:
            x -= p
            if x < 0:
                return k
        return items[-1][0]

    def sample_reparandum(self, repair: Sequence[str], rng: random.Random,
                          max_tries: int = 100, avoid: Iterable[str] = ()):
        """Draw a non-empty reparandum for ``repair``; returns ``(words, ops)``.

        Runs the op chain exactly as scored: stop after any op with
        ``p_stop``.  Draws that are empty, that consume more repair than the
        scored context window (reparandum length + REPAIR_SLACK) or that
        contain a word from ``avoid`` are rejected and redrawn.  Returns
        None when every try is rejected.
        """
        avoid = set(avoid)
        ins_dist = {w: self.sub_prob(w, EPS) for w in self.vocab if w not in avoid}
        for _ in range(max_tries):
            words, ops, prev, j = [], [], START, 0
            ok = True
            while True:
                kind = Op(self._draw(rng, self.p_op[prev]))
                if kind is not Op.INSERT and j >= len(repair):
                    ok = False
                    break
                if kind is Op.COPY:
                    ops.append(AlignOp(kind, repair[j], repair[j]))
                    words.append(repair[j])
                    j += 1
                elif kind is Op.SUBSTITUTE:
                    dist = {w: self.sub_prob(w, repair[j]) for w in self.vocab if w != repair[j]}
                    w = self._draw(rng, dist)
                    ops.append(AlignOp(kind, w, repair[j]))
                    words.append(w)
                    j += 1
                elif kind is Op.INSERT:
                    w = self._draw(rng, ins_dist)
                    ops.append(AlignOp(kind, w, None))
                    words.append(w)
                else:
                    ops.append(AlignOp(kind, None, repair[j]))
                    j += 1
                prev = kind.value
                if rng.random() < self.p_stop:
                    break
            if ok and words and j <= len(words) + REPAIR_SLACK and not avoid.intersection(words):
                return words, ops
        return None

    # -- persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "p_op": {p: dict(sorted(r.items())) for p, r in sorted(self.p_op.items())},
            "sub_counts": {m: dict(sorted(ws.items())) for m, ws in sorted(self.sub_counts.items())},
            "vocab": list(self.vocab),
            "p_start": self.p_start,
            "p_stop": self.p_stop,
            "p_filler": self.p_filler,
            "alpha": self.alpha,
            "fillers": [list(p) for p in self.fillers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelModel":
        return cls(d["p_op"], {m: {w: float(c) for w, c in ws.items()} for m, ws in d["sub_counts"].items()},
                   tuple(d["vocab"]), d["p_start"], d["p_stop"], d["p_filler"], d["alpha"],
                   tuple(tuple(p) for p in d["fillers"]))

    def save(self, f: BinaryIO) -> None:
        f.write(MAGIC + b"\n")
        f.write(json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")

    @classmethod
    def load(cls, f: BinaryIO) -> "ChannelModel":
        head = f.readline().rstrip(b"\n")
        if head != MAGIC:
            raise ValueError(f"not a channel model file (magic {head!r})")
        return cls.from_dict(json.loads(f.read().decode("utf-8")))


def _viterbi_align(model: ChannelModel, D: tuple[str, ...], R: tuple[str, ...]):
    m, r = len(D), len(R)
    NEG = -math.inf
    kinds = OPS
    # best[(i, j, kind)] = (logprob, backpointer)
    best: dict = {}

    def relax(state, lp, back):
        cur = best.get(state)
        if cur is None or lp > cur[0]:
            best[state] = (lp, back)

    def moves(i, j):
        if i < m and j < r:
            if D[i] == R[j]:
                yield Op.COPY, i + 1, j + 1, 0.0
            else:
                yield Op.SUBSTITUTE, i + 1, j + 1, model.sub_logprob(D[i], R[j])
        if i < m:
            yield Op.INSERT, i + 1, j, model.sub_logprob(D[i], EPS)
        if j < r:
            yield Op.DELETE, i, j + 1, 0.0

    for kind, i2, j2, emit in moves(0, 0):
        relax((i2, j2, kind), model.op_logprob(kind, START) + emit, None)
    for i in range(m + 1):
        for j in range(r + 1):
            for prev in kinds:
                cur = best.get((i, j, prev))
                if cur is None:
                    continue
                for kind, i2, j2, emit in moves(i, j):
                    lp = cur[0] + model.log_go + model.op_logprob(kind, prev) + emit
                    relax((i2, j2, kind), lp, (i, j, prev))

    end, end_lp = None, NEG
    for j in range(r + 1):
        for kind in kinds:
            cur = best.get((m, j, kind))
            if cur is not None and cur[0] + model.log_stop > end_lp:
                end, end_lp = (m, j, kind), cur[0] + model.log_stop
    if end is None:
        return NEG, ()
    ops = []
    state = end
    while state is not None:
        i, j, kind = state
        if kind is Op.COPY:
            ops.append(AlignOp(kind, D[i - 1], R[j - 1]))
        elif kind is Op.SUBSTITUTE:
            ops.append(AlignOp(kind, D[i - 1], R[j - 1]))
        elif kind is Op.INSERT:
            ops.append(AlignOp(kind, D[i - 1], None))
        else:
            ops.append(AlignOp(kind, None, R[j - 1]))
        state = best[state][1]
    return end_lp, tuple(reversed(ops))


# -- region structure -----------------------------------------------------------

def iter_events(labels: Sequence[Label]):
    """Yield ``("fluent", i)``, ``("filler", i)`` or ``("region", s, e, f, g)``.

    A region is a maximal EDITED run ``[s, e)``, its interregnum ``[e, f)``
    (the FILLER run that follows) and its repair context ``[f, g)`` (the
    non-FILLER run after that).
    """
    n = len(labels)
    i = 0
    while i < n:
        lab = labels[i]
        if lab is Label.FILLER:
            yield ("filler", i)
            i += 1
        elif lab is Label.FLUENT:
            yield ("fluent", i)
            i += 1
        else:
            e = i
            while e < n and labels[e] is Label.EDITED:
                e += 1
            f = e
            while f < n and labels[f] is Label.FILLER:
                f += 1
            g = f
            while g < n and labels[g] is not Label.FILLER:
                g += 1
            yield ("region", i, e, f, g)
            i = f


def channel_logprob_of(words: Sequence[str], labels: Sequence[Label], model: ChannelModel) -> float:
    ch = 0.0
    for ev in iter_events(labels):
        if ev[0] == "fluent":
            ch += model.log_no_start
        elif ev[0] == "filler":
            ch += model.log_filler
        else:
            _, s, e, f, g = ev
            ch += model.region_logprob(words[s:e], words[f:g], f - e)
    return ch


def repairs_of(words: Sequence[str], labels: Sequence[Label],
               model: ChannelModel | None = None) -> tuple[RepairRegion, ...]:
    out = []
    for ev in iter_events(labels):
        if ev[0] != "region":
            continue
        _, s, e, f, g = ev
        if model is None:
            out.append(RepairRegion((s, e), (e, f), (f, f)))
            continue
        _, ops = model.align(words[s:e], words[f:g][:e - s + REPAIR_SLACK])
        used = sum(op.kind is not Op.INSERT for op in ops)
        out.append(RepairRegion((s, e), (e, f), (f, f + used), ops))
    return tuple(out)


def make_analysis(utterance: Utterance, labels: Sequence[Label | str], model: ChannelModel,
                  lm, with_alignment: bool = True) -> Analysis:
    words = utterance.words
    labels = tuple(Label(l) for l in labels)
    if len(labels) != len(words):
        raise ValueError("label/word length mismatch")
    fluent = tuple(w for w, l in zip(words, labels) if l is Label.FLUENT)
    ch = channel_logprob_of(words, labels, model)
    lm_lp = lm.logprob(fluent)
    return Analysis(utterance.id, words, labels, fluent,
                    repairs_of(words, labels, model if with_alignment else None),
                    ch, lm_lp, ch + lm_lp, sum(l is Label.EDITED for l in labels))


def score_channel(analysis: Analysis, model: ChannelModel) -> float:
    """log P(Y | X) for one analysis; validates its repair spans first."""
    n = len(analysis.words)
    if len(analysis.labels) != n:
        raise MalformedSpanError("labels and words differ in length")
    last = 0
    for reg in analysis.repairs:
        (a, b), (_, d), (_, f) = reg.reparandum_span, reg.interregnum_span, reg.repair_span
        if a < last or f > n:
            raise MalformedSpanError(f"region {reg.reparandum_span} overlaps or exceeds the utterance")
        last = b
    runs = [(ev[1], ev[2]) for ev in iter_events(analysis.labels) if ev[0] == "region"]
    if analysis.repairs and runs != [r.reparandum_span for r in analysis.repairs]:
        raise MalformedSpanError("repair regions disagree with the EDITED labels")
    return channel_logprob_of(analysis.words, analysis.labels, model)


# -- training -----------------------------------------------------------------

def edit_alignment(reparandum: Sequence[str], repair: Sequence[str]) -> list[AlignOp]:
    """Minimum-edit-distance alignment of ``reparandum`` to a prefix of ``repair``.

    Copies cost 0; substitutions, insertions and deletions cost 1.  Among
    equally cheap prefixes the one closest in length to the reparandum wins
    (shorter first); the backtrace prefers the diagonal, then insertion,
    then deletion.
    """
    D, R = list(reparandum), list(repair)
    m, r = len(D), len(R)
    cost = [[0] * (r + 1) for _ in range(m + 1)]
    for i in range(1, m + 1):
        cost[i][0] = i
    for j in range(1, r + 1):
        cost[0][j] = j
    for i in range(1, m + 1):
        for j in range(1, r + 1):
            diag = cost[i - 1][j - 1] + (D[i - 1] != R[j - 1])
            cost[i][j] = min(diag, cost[i - 1][j] + 1, cost[i][j - 1] + 1)
    jbest = min(range(r + 1), key=lambda j: (cost[m][j], abs(j - m), j))
    ops = []
    i, j = m, jbest
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i][j] == cost[i - 1][j - 1] + (D[i - 1] != R[j - 1]):
            kind = Op.COPY if D[i - 1] == R[j - 1] else Op.SUBSTITUTE
            ops.append(AlignOp(kind, D[i - 1], R[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and cost[i][j] == cost[i - 1][j] + 1:
            ops.append(AlignOp(Op.INSERT, D[i - 1], None))
            i -= 1
        else:
            ops.append(AlignOp(Op.DELETE, None, R[j - 1]))
            j -= 1
    return list(reversed(ops))


def _clip(p: float, eps: float = 1e-6) -> float:
    return min(max(p, eps), 1.0 - eps)


def _expected_counts(model: ChannelModel, D: Sequence[str], R: Sequence[str],
                     trans, subs) -> tuple[float, float]:
    """Add posterior op/emission counts for one region.

    Returns the expected number of ops and the total path probability.

    Forward-backward over the alignment lattice whose Viterbi path
    :meth:`ChannelModel.align` returns.
    """
    m, r = len(D), len(R)

    def moves(i, j):
        if i < m and j < r:
            if D[i] == R[j]:
                yield Op.COPY.value, i + 1, j + 1, 1.0, None
            else:
                yield Op.SUBSTITUTE.value, i + 1, j + 1, model.sub_prob(D[i], R[j]), (R[j], D[i])
        if i < m:
            yield Op.INSERT.value, i + 1, j, model.sub_prob(D[i], EPS), (EPS, D[i])
        if j < r:
            yield Op.DELETE.value, i, j + 1, 1.0, None

    go = 1.0 - model.p_stop
    edges = []  # (src, dst, kind, weight, emission)
    for kind, i2, j2, w, em in moves(0, 0):
        edges.append((None, (i2, j2, kind), kind, model.p_op[START][kind] * w, em))
    for i in range(m + 1):
        for j in range(r + 1):
            for prev in (o.value for o in OPS):
                for kind, i2, j2, w, em in moves(i, j):
                    edges.append(((i, j, prev), (i2, j2, kind), kind,
                                  go * model.p_op[prev][kind] * w, em))
    alpha: dict = defaultdict(float)
    for src, dst, _, w, _ in edges:   # edges are in topological order
        alpha[dst] += w * (1.0 if src is None else alpha.get(src, 0.0))
    beta: dict = defaultdict(float)
    for j in range(r + 1):
        for prev in (o.value for o in OPS):
            beta[(m, j, prev)] = model.p_stop
    for src, dst, _, w, _ in reversed(edges):
        if src is not None:
            beta[src] += w * beta.get(dst, 0.0)
    Z = sum(alpha.get((m, j, k.value), 0.0) * model.p_stop for j in range(r + 1) for k in OPS)
    if Z <= 0.0:
        return 0.0, 0.0
    n_ops = 0.0
    for src, dst, kind, w, em in edges:
        a = 1.0 if src is None else alpha.get(src, 0.0)
        post = a * w * beta.get(dst, 0.0) / Z
        if post == 0.0:
            continue
        trans[START if src is None else src[2]][kind] += post
        n_ops += post
        if em is not None:
            subs[em[0]][em[1]] += post
    return n_ops, Z


def _estimate(trans, subs, vocab, n_regions, n_fluent, n_ops, alpha, p_filler, fillers):
    p_op = {}
    for prev in PREV_STATES:
        row = trans.get(prev, {})
        tot = sum(row.values()) + alpha * len(OPS)
        p_op[prev] = {o.value: (row.get(o.value, 0) + alpha) / tot for o in OPS}
    return ChannelModel(
        p_op=p_op,
        sub_counts={m: dict(sorted(ws.items())) for m, ws in sorted(subs.items())},
        vocab=tuple(sorted(vocab)),
        p_start=_clip(n_regions / (n_regions + n_fluent)),
        p_stop=_clip(n_regions / n_ops),
        p_filler=p_filler,
        alpha=alpha,
        fillers=tuple(tuple(p) for p in fillers),
    )


def train_channel(annotated: Iterable[Utterance], alpha: float = 0.1, p_filler: float = 0.5,
                  fillers: Sequence[Sequence[str]] = DEFAULT_FILLERS,
                  em_iterations: int = 0) -> ChannelModel:
    """Estimate channel parameters from gold-labelled utterances.

    Each gold reparandum is first aligned to its repair by minimum edit
    distance and op transitions and substitution pairs are counted,
    smoothed add-alpha.  ``em_iterations`` rounds of EM then replace the
    single alignment by posterior expected counts under the current model;
    with ``em_iterations=0`` the edit-distance estimate is returned.
    """
    vocab: set[str] = set()
    regions = []
    n_fluent = 0
    for utt in annotated:
        if utt.gold is None:
            raise ValueError(f"utterance {utt.id} has no gold labels")
        words = utt.words
        vocab.update(words)
        for ev in iter_events(utt.gold):
            if ev[0] == "fluent":
                n_fluent += 1
            elif ev[0] == "region":
                _, s, e, f, g = ev
                regions.append((words[s:e], words[f:g][:e - s + REPAIR_SLACK]))
    if not regions:
        raise NoRepairsError("training data contains no repairs")

    trans: dict = defaultdict(Counter)
    subs: dict = defaultdict(Counter)
    n_ops = 0
    for D, R in regions:
        ops = edit_alignment(D, R)
        n_ops += len(ops)
        prev = START
        for op in ops:
            trans[prev][op.kind.value] += 1
            prev = op.kind.value
            if op.kind is Op.SUBSTITUTE:
                subs[op.repair_word][op.reparandum_word] += 1
            elif op.kind is Op.INSERT:
                subs[EPS][op.reparandum_word] += 1
    model = _estimate(trans, subs, vocab, len(regions), n_fluent, n_ops, alpha, p_filler, fillers)

    grouped = Counter(regions)
    for _ in range(em_iterations):
        trans = defaultdict(lambda: defaultdict(float))
        subs = defaultdict(lambda: defaultdict(float))
        n_ops = 0.0
        for (D, R), count in sorted(grouped.items()):
            t1 = defaultdict(lambda: defaultdict(float))
            s1 = defaultdict(lambda: defaultdict(float))
            k, _ = _expected_counts(model, D, R, t1, s1)
            n_ops += count * k
            for a, row in t1.items():
                for b, v in row.items():
                    trans[a][b] += count * v
            for a, row in s1.items():
                for b, v in row.items():
                    subs[a][b] += count * v
        model = _estimate(trans, subs, vocab, len(regions), n_fluent, n_ops, alpha, p_filler, fillers)
    return model


# -- n-best search --------------------------------------------------------------

def _finish(utterance, scored, n, model, lm, fmask):
    """Sort ``(ch, lm, labels)`` triples, keep n, force in the all-fluent analysis."""
    scored.sort(key=lambda t: (-(t[0] + t[1]), t[2]))
    fluent_labels = "".join("F" if x else "O" for x in fmask)
    top = scored[:n]
    if all(t[2] != fluent_labels for t in top):
        words = utterance.words
        ch = channel_logprob_of(words, [Label(c) for c in fluent_labels], model)
        lm_lp = lm.logprob(tuple(w for w, x in zip(words, fmask) if not x))
        top = top[:n - 1] + [(ch, lm_lp, fluent_labels)]
        top.sort(key=lambda t: (-(t[0] + t[1]), t[2]))
    cands = tuple(make_analysis(utterance, labels, model, lm) for _, _, labels in top)
    return CandidateList(utterance, cands, n)


def nbest(utterance: Utterance, model: ChannelModel, lm, n: int = 25, beam: int | None = 100,
          max_regions: int | None = 3, max_reparandum: int | None = 8) -> CandidateList:
    """Top-``n`` analyses by channel plus bigram-LM log-probability.

    Dynamic programming over (position, last fluent word, whether a
    reparandum just ended without interregnum, regions used), keeping the
    ``n`` best partial analyses per state and at most ``beam`` per position.
    ``None`` disables the corresponding limit.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if getattr(lm, "order", 2) > 2:
        raise ValueError("the channel search needs a bigram (or unigram) language model")
    words = utterance.words
    N = len(words)
    fmask = filler_mask(words, model.fillers)
    filler_end = list(range(N + 1))
    for i in range(N - 1, -1, -1):
        if fmask[i]:
            filler_end[i] = filler_end[i + 1]
    run_end = list(range(N + 1))
    for i in range(N - 1, -1, -1):
        if not fmask[i]:
            run_end[i] = run_end[i + 1]

    # agenda[i][(last_word, glued, n_regions)] -> list of (ch, lm, labels)
    agenda: list[dict] = [defaultdict(list) for _ in range(N + 1)]
    agenda[0][(None, False, 0)].append((0.0, 0.0, ""))

    def context(last):
        return () if last is None else (last,)

    for i in range(N):
        states = agenda[i]
        pool = []
        for key, hyps in states.items():
            hyps.sort(key=lambda t: (-(t[0] + t[1]), t[2]))
            pool.extend((h, key) for h in hyps[:n])
        agenda[i] = None
        if beam is not None and len(pool) > beam:
            pool.sort(key=lambda hk: (-(hk[0][0] + hk[0][1]), hk[0][2]))
            pool = pool[:beam]
        w = words[i]
        for (ch, lm_lp, labels), (last, glued, k) in pool:
            if fmask[i]:
                agenda[i + 1][(last, False, k)].append((ch + model.log_filler, lm_lp, labels + "F"))
                continue
            agenda[i + 1][(w, False, k)].append(
                (ch + model.log_no_start, lm_lp + lm.cond_logprob(w, context(last)), labels + "O"))
            if glued or (max_regions is not None and k >= max_regions):
                continue
            stop = run_end[i] if max_reparandum is None else min(run_end[i], i + max_reparandum)
            for e in range(i + 1, stop + 1):
                f = filler_end[e]
                g = run_end[f]
                term = model.region_logprob(words[i:e], words[f:g], f - e)
                agenda[f][(last, f == e, k + 1)].append(
                    (ch + term, lm_lp, labels + "E" * (e - i) + "F" * (f - e)))

    done = []
    for (last, _, _), hyps in agenda[N].items():
        for ch, lm_lp, labels in hyps:
            done.append((ch, lm_lp + lm.cond_logprob("</s>", context(last)), labels))
    return _finish(utterance, done, n, model, lm, fmask)


def brute_force_nbest(utterance: Utterance, model: ChannelModel, lm, n: int = 25) -> CandidateList:
    """Exhaustive reference for :func:`nbest` (at most 12 tokens)."""
    words = utterance.words
    if len(words) > BRUTE_FORCE_MAX:
        raise InputTooLongError(f"{len(words)} tokens; brute force handles at most {BRUTE_FORCE_MAX}")
    fmask = filler_mask(words, model.fillers)
    free = [i for i, x in enumerate(fmask) if not x]
    scored = []
    for choice in itertools.product("OE", repeat=len(free)):
        labels = ["F" if x else "O" for x in fmask]
        for i, c in zip(free, choice):
            labels[i] = c
        labs = [Label(c) for c in labels]
        ch = channel_logprob_of(words, labs, model)
        lm_lp = lm.logprob(tuple(w for w, l in zip(words, labs) if l is Label.FLUENT))
        scored.append((ch, lm_lp, "".join(labels)))
    return _finish(utterance, scored, n, model, lm, fmask)


# -- interchange --------------------------------------------------------------

def candidates_to_json(cl: CandidateList) -> str:
    return json.dumps({
        "id": cl.utterance.id,
        "tokens": list(cl.utterance.words),
        "candidates": [
            {"labels": [l.value for l in c.labels], "channel_lp": c.channel_logprob,
             "lm_lp": c.ncm_lm_logprob, "total_lp": c.ncm_total_logprob, "n_edits": c.n_edits}
            for c in cl.candidates
        ],
    }, separators=(",", ":"))


def write_candidates(lists: Iterable[CandidateList], stream: TextIO) -> None:
    for cl in lists:
        stream.write(candidates_to_json(cl) + "\n")


def read_candidates(stream: TextIO, model: ChannelModel | None = None,
                    gold: dict[str, Utterance] | None = None) -> list[CandidateList]:
    out = []
    for line in stream:
        if not line.strip():
            continue
        rec = json.loads(line)
        utt = gold.get(rec["id"]) if gold else None
        if utt is None:
            utt = Utterance.from_words(rec["id"], rec["tokens"])
        words = tuple(rec["tokens"])
        cands = []
        for c in rec["candidates"]:
            labels = tuple(Label(x) for x in c["labels"])
            cands.append(Analysis(
                rec["id"], words, labels,
                tuple(w for w, l in zip(words, labels) if l is Label.FLUENT),
                repairs_of(words, labels, model), float(c["channel_lp"]), float(c["lm_lp"]),
                float(c["total_lp"]), int(c["n_edits"])))
        out.append(CandidateList(utt, tuple(cands), len(cands)))
    return out
