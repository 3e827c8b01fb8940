"""Transcript ingestion, normalization, splitting and synthetic corpora.

Two on-disk formats are understood:

TSV
    one token per line, ``token<TAB>label`` with label in ``O``, ``E``, ``F``.
    A blank line separates utterances.  An optional ``# id = <id>`` line
    before the first token names the utterance.

DPS-like
    one utterance per line, plain tokens with Shriberg-style bracketing
    ``[ reparandum + { interregnum } repair ]``.  Brackets nest.  A line may
    start with ``<id><TAB>``.
"""
from __future__ import annotations

import enum
import io
import random
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence, TextIO


class Label(str, enum.Enum):
    FLUENT = "O"
    EDITED = "E"
    FILLER = "F"

    def __str__(self) -> str:
        return self.value


O, E, F = Label.FLUENT, Label.EDITED, Label.FILLER

DEFAULT_FILLERS: tuple[tuple[str, ...], ...] = (
    ("uh",), ("um",), ("uh-huh",), ("i", "mean"), ("you", "know"), ("well",), ("like",),
)


class FormatError(ValueError):
    """Malformed annotated input.  ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class UnbalancedBracketError(FormatError):
    pass


def is_partial_surface(surface: str) -> bool:
    return len(surface) >= 2 and surface.endswith("-")


def is_punct_surface(surface: str) -> bool:
    return not any(ch.isalnum() for ch in surface)


@dataclass(frozen=True)
class Token:
    surface: str
    is_partial: bool = False
    is_punct: bool = False

    def __post_init__(self):
        if not self.surface:
            raise ValueError("token surface must be non-empty")

    @classmethod
    def of(cls, surface: str) -> "Token":
        return cls(surface, is_partial_surface(surface), is_punct_surface(surface))


@dataclass(frozen=True)
class Utterance:
    id: str
    tokens: tuple[Token, ...]
    gold: tuple[Label, ...] | None = None

    def __post_init__(self):
        if self.gold is not None and len(self.gold) != len(self.tokens):
            raise ValueError(
                f"utterance {self.id}: {len(self.gold)} labels for {len(self.tokens)} tokens")

    @classmethod
    def from_words(cls, uid: str, words: Iterable[str],
                   gold: Iterable[Label | str] | None = None) -> "Utterance":
        tokens = tuple(Token.of(w) for w in words)
        labels = None if gold is None else tuple(Label(g) for g in gold)
        return cls(uid, tokens, labels)

    @property
    def words(self) -> tuple[str, ...]:
        return tuple(t.surface for t in self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def fluent_words(self) -> tuple[str, ...]:
        """Words left after deleting gold EDITED and FILLER tokens."""
        if self.gold is None:
            raise ValueError(f"utterance {self.id} has no gold labels")
        return tuple(t.surface for t, g in zip(self.tokens, self.gold) if g is Label.FLUENT)


@dataclass(frozen=True)
class CorpusSplit:
    train: frozenset[str]
    dev: frozenset[str] = frozenset()
    test: frozenset[str] = frozenset()
    folds: tuple[frozenset[str], ...] = field(default=())

    def __post_init__(self):
        if self.train & self.dev or self.train & self.test or self.dev & self.test:
            raise ValueError("train/dev/test overlap")
        if self.folds:
            if len(self.folds) < 2:
                raise ValueError("need at least 2 folds")
            seen: set[str] = set()
            for fold in self.folds:
                if seen & fold:
                    raise ValueError("folds overlap")
                seen |= fold
            if seen != set(self.train):
                raise ValueError("folds do not cover train")

    @property
    def k(self) -> int:
        return len(self.folds)

    def fold_of(self, uid: str) -> int:
        for i, fold in enumerate(self.folds):
            if uid in fold:
                return i
        raise KeyError(uid)


# -- filler lexicon ---------------------------------------------------------

def filler_mask(words: Sequence[str],
                fillers: Iterable[Sequence[str]] = DEFAULT_FILLERS) -> list[bool]:
    """Greedy left-to-right longest match of filler phrases."""
    phrases = sorted({tuple(p) for p in fillers}, key=len, reverse=True)
    mask = [False] * len(words)
    i = 0
    while i < len(words):
        for p in phrases:
            if tuple(words[i:i + len(p)]) == p:
                for j in range(i, i + len(p)):
                    mask[j] = True
                i += len(p)
                break
        else:
            i += 1
    return mask


def is_filler_phrase(words: Sequence[str],
                     fillers: Iterable[Sequence[str]] = DEFAULT_FILLERS) -> bool:
    return bool(words) and all(filler_mask(words, fillers))


# -- normalization ----------------------------------------------------------

def normalize(raw: Utterance) -> Utterance:
    """Drop partial words and punctuation (labels follow), lowercase the rest."""
    keep = [i for i, t in enumerate(raw.tokens) if not (t.is_partial or t.is_punct)]
    tokens = tuple(Token.of(raw.tokens[i].surface.lower()) for i in keep)
    gold = None if raw.gold is None else tuple(raw.gold[i] for i in keep)
    return Utterance(raw.id, tokens, gold)


# -- readers / writers ------------------------------------------------------

def _auto_id(index: int) -> str:
    return f"u{index:06d}"


def _iter_tsv(lines: Iterable[str]) -> Iterator[Utterance]:
    words: list[str] = []
    labels: list[str] = []
    uid: str | None = None
    index = 0

    def flush():
        nonlocal words, labels, uid, index
        utt = Utterance.from_words(uid if uid is not None else _auto_id(index), words, labels)
        words, labels, uid = [], [], None
        index += 1
        return utt

    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            if words:
                yield flush()
            elif uid is not None:
                raise FormatError("id line without tokens", lineno)
            continue
        if line.startswith("# id = ") and not words:
            uid = line[len("# id = "):]
            continue
        cols = line.split("\t")
        if len(cols) != 2 or not cols[0]:
            raise FormatError(f"expected token<TAB>label, got {len(cols)} column(s)", lineno)
        if cols[1] not in ("O", "E", "F"):
            raise FormatError(f"unknown label {cols[1]!r}", lineno)
        words.append(cols[0])
        labels.append(cols[1])
    if words:
        yield flush()


def _parse_dps_line(text: str, lineno: int) -> tuple[list[str], list[Label]]:
    words: list[str] = []
    labels: list[Label] = []
    # stack entries: "rep" (before +) or "fix" (after +)
    stack: list[str] = []
    in_braces = False
    for tok in text.split():
        if tok == "[":
            if in_braces:
                raise FormatError("'[' inside interregnum braces", lineno)
            stack.append("rep")
        elif tok == "+":
            if not stack or stack[-1] != "rep" or in_braces:
                raise FormatError("'+' outside a reparandum", lineno)
            stack[-1] = "fix"
        elif tok == "]":
            if not stack or in_braces:
                raise UnbalancedBracketError("unmatched ']'", lineno)
            if stack.pop() != "fix":
                raise FormatError("region closed without '+'", lineno)
        elif tok == "{":
            if in_braces:
                raise UnbalancedBracketError("nested '{'", lineno)
            in_braces = True
        elif tok == "}":
            if not in_braces:
                raise UnbalancedBracketError("unmatched '}'", lineno)
            in_braces = False
        else:
            words.append(tok)
            if "rep" in stack:
                labels.append(E)
            elif in_braces:
                labels.append(F)
            else:
                labels.append(O)
    if stack or in_braces:
        raise UnbalancedBracketError("unclosed bracket", lineno)
    return words, labels


def _iter_dps(lines: Iterable[str]) -> Iterator[Utterance]:
    index = 0
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        uid = _auto_id(index)
        if "\t" in line:
            uid, line = line.split("\t", 1)
        words, labels = _parse_dps_line(line, lineno)
        if not words:
            raise FormatError("utterance has no tokens", lineno)
        yield Utterance.from_words(uid, words, labels)
        index += 1


def parse_annotated(text: TextIO | str, format: str = "tsv") -> list[Utterance]:
    """Read annotated utterances from a stream (or a string) in ``tsv`` or ``dps`` format."""
    stream = io.StringIO(text) if isinstance(text, str) else text
    fmt = format.lower().replace("_", "-")
    if fmt == "tsv":
        return list(_iter_tsv(stream))
    if fmt in ("dps", "dps-like"):
        return list(_iter_dps(stream))
    raise ValueError(f"unknown format {format!r}")


def format_tsv(utterances: Iterable[Utterance]) -> str:
    chunks = []
    for index, utt in enumerate(utterances):
        if utt.gold is None:
            raise ValueError(f"utterance {utt.id} has no labels to write")
        lines = [] if utt.id == _auto_id(index) else [f"# id = {utt.id}"]
        lines += [f"{t.surface}\t{g.value}" for t, g in zip(utt.tokens, utt.gold)]
        chunks.append("\n".join(lines) + "\n")
    return "\n".join(chunks)


def write_tsv(utterances: Iterable[Utterance], stream: TextIO) -> None:
    stream.write(format_tsv(utterances))


def read_id_list(stream: TextIO) -> list[str]:
    return [line.strip() for line in stream if line.strip()]


# -- splitting --------------------------------------------------------------

def make_folds(train: Iterable[Utterance | str], k: int, seed: int,
               dev: Iterable[Utterance | str] = (),
               test: Iterable[Utterance | str] = ()) -> CorpusSplit:
    """Partition the training ids into ``k`` folds whose sizes differ by at most one."""
    def ids(xs):
        return [x.id if isinstance(x, Utterance) else x for x in xs]

    train_ids = sorted(set(ids(train)))
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(train_ids) < k:
        raise ValueError(f"k={k} exceeds the number of training utterances ({len(train_ids)})")
    random.Random(seed).shuffle(train_ids)
    base, extra = divmod(len(train_ids), k)
    folds, start = [], 0
    # the larger folds go last, so 101/20 gives 19 folds of 5 then one of 6
    for i in range(k):
        size = base + (1 if i >= k - extra else 0)
        folds.append(frozenset(train_ids[start:start + size]))
        start += size
    return CorpusSplit(frozenset(train_ids), frozenset(ids(dev)), frozenset(ids(test)),
                       tuple(folds))


def split_corpus(utterances: Sequence[Utterance], dev_frac: float, test_frac: float,
                 seed: int) -> tuple[list[Utterance], list[Utterance], list[Utterance]]:
    order = list(range(len(utterances)))
    random.Random(seed).shuffle(order)
    n_dev = int(round(dev_frac * len(order)))
    n_test = int(round(test_frac * len(order)))
    dev = sorted(order[:n_dev])
    test = sorted(order[n_dev:n_dev + n_test])
    train = sorted(order[n_dev + n_test:])
    pick = lambda idx: [utterances[i] for i in idx]  # noqa: E731
    return pick(train), pick(dev), pick(test)


# -- synthetic data ---------------------------------------------------------

def synthesize_corpus(fluent: Sequence[Utterance], channel_params, rate: float, seed: int,
                      interregnum_prob: float = 0.3,
                      fillers: Sequence[Sequence[str]] = DEFAULT_FILLERS,
                      min_repair: int = 1) -> list[Utterance]:
    """Inject rough-copy disfluencies into fluent utterances.

    Each utterance independently receives one disfluency with probability
    ``rate``: a repair point is drawn uniformly, the reparandum is sampled
    from ``channel_params`` against the words that follow it, and with
    probability ``interregnum_prob`` a filler phrase is placed between
    reparandum and repair.  Gold labels mark the injected material.

    The repair point is drawn among positions followed by at least
    ``min_repair`` words; utterances too short for that stay fluent.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    rng = random.Random(seed)
    phrases = [tuple(p) for p in fillers]
    filler_words = {w for p in phrases for w in p}
    out = []
    for utt in fluent:
        words = list(utt.words)
        labels = [O] * len(words)
        if len(words) >= min_repair and rng.random() < rate:
            i = rng.randrange(len(words) - max(min_repair, 1) + 1)
            drawn = channel_params.sample_reparandum(words[i:], rng, avoid=filler_words)
            if drawn is None:
                out.append(Utterance.from_words(utt.id, words, labels))
                continue
            reparandum = drawn[0]
            inter = list(rng.choice(phrases)) if rng.random() < interregnum_prob else []
            words = words[:i] + reparandum + inter + words[i:]
            labels = labels[:i] + [E] * len(reparandum) + [F] * len(inter) + labels[i:]
        out.append(Utterance.from_words(utt.id, words, labels))
    return out


def strip_labels(utt: Utterance) -> Utterance:
    return replace(utt, gold=None)
