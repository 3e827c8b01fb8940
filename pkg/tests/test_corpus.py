import io

import pytest
from hypothesis import given, settings, strategies as st

from disfluency.corpus import (E, F, O, CorpusSplit, FormatError, Label, Token, UnbalancedBracketError,
                               Utterance, filler_mask, format_tsv, make_folds, normalize,
                               parse_annotated, split_corpus, synthesize_corpus)
from disfluency.synthetic import fluent_corpus, reference_channel, ToyGrammar

EXAMPLE_TSV = "a\tO\nflight\tO\nto\tE\nboston\tE\nuh\tF\ni\tF\nmean\tF\nto\tO\ndenver\tO\n"


def test_normalize_drops_partials_and_punct_in_lockstep():
    u = Utterance.from_words("x", ["i", "wan-", "want", ","], [O, E, O, O])
    n = normalize(u)
    assert n.words == ("i", "want")
    assert n.gold == (O, O)


def test_normalize_identity_and_empty():
    assert normalize(Utterance.from_words("x", ["a", "flight"])).words == ("a", "flight")
    assert normalize(Utterance.from_words("x", [","])).words == ()


def test_normalize_lowercases():
    assert normalize(Utterance.from_words("x", ["Boston", "I"])).words == ("boston", "i")


def test_token_flags():
    assert Token.of("wan-").is_partial and not Token.of("-").is_partial
    assert Token.of("-").is_punct and Token.of("?!").is_punct
    assert not Token.of("uh-huh").is_partial and not Token.of("uh-huh").is_punct
    with pytest.raises(ValueError):
        Token("")


def test_parse_tsv_example():
    [u] = parse_annotated(EXAMPLE_TSV)
    assert u.gold == tuple(Label(x) for x in "OOEEFFFOO")
    assert u.id == "u000000"


def test_parse_empty_stream():
    assert parse_annotated(io.StringIO("")) == []


def test_parse_three_columns_is_malformed():
    with pytest.raises(FormatError) as ei:
        parse_annotated("a\tO\nb\tO\tx\n")
    assert ei.value.lineno == 2


def test_parse_bad_label():
    with pytest.raises(FormatError):
        parse_annotated("a\tX\n")


def test_tsv_ids_and_round_trip():
    text = "# id = utt7\na\tO\nb\tE\nb\tO\n\nc\tO\n"
    utts = parse_annotated(text)
    assert [u.id for u in utts] == ["utt7", "u000001"]
    assert format_tsv(utts) == text


def test_dps_example():
    [u] = parse_annotated("a flight [ to boston + { uh i mean } to denver ]", "dps")
    assert u.words == ("a", "flight", "to", "boston", "uh", "i", "mean", "to", "denver")
    assert "".join(l.value for l in u.gold) == "OOEEFFFOO"


def test_dps_nesting_and_ids():
    [u] = parse_annotated("s1\t[ [ i + i ] + i ] want", "dps")
    assert u.id == "s1"
    assert "".join(l.value for l in u.gold) == "EEOO"


@pytest.mark.parametrize("line", ["[ a + b", "a ] b", "{ uh", "a } b"])
def test_dps_unbalanced(line):
    with pytest.raises(UnbalancedBracketError):
        parse_annotated(line, "dps")


def test_dps_missing_plus():
    with pytest.raises(FormatError):
        parse_annotated("[ a b ]", "dps")


def test_filler_mask_longest_match():
    assert filler_mask(["you", "know", "i", "mean", "it"]) == [True, True, True, True, False]
    assert filler_mask(["i", "want"]) == [False, False]


def _utts(n):
    return [Utterance.from_words(f"u{i:03d}", ["w"]) for i in range(n)]


def test_folds_sizes():
    s = make_folds(_utts(100), 20, seed=3)
    assert sorted(len(f) for f in s.folds) == [5] * 20
    s = make_folds(_utts(101), 20, seed=3)
    assert sorted(len(f) for f in s.folds) == [5] * 19 + [6]


def test_folds_deterministic_and_seed_sensitive():
    assert make_folds(_utts(50), 5, 1).folds == make_folds(_utts(50), 5, 1).folds
    assert make_folds(_utts(50), 5, 1).folds != make_folds(_utts(50), 5, 2).folds


def test_folds_errors():
    with pytest.raises(ValueError):
        make_folds(_utts(10), 1, 0)
    with pytest.raises(ValueError):
        make_folds(_utts(3), 5, 0)


@given(st.integers(2, 60), st.integers(0, 40), st.integers(0, 10 ** 6))
def test_folds_partition(k, extra, seed):
    utts = _utts(k + extra)
    s = make_folds(utts, k, seed)
    union = set().union(*s.folds)
    assert union == {u.id for u in utts}
    assert sum(len(f) for f in s.folds) == len(utts)
    sizes = [len(f) for f in s.folds]
    assert max(sizes) - min(sizes) <= 1
    for u in utts:
        assert u.id in s.folds[s.fold_of(u.id)]


def test_split_rejects_overlap():
    with pytest.raises(ValueError):
        CorpusSplit(frozenset({"a"}), frozenset({"a"}))


def test_split_corpus_disjoint():
    utts = _utts(100)
    tr, dv, te = split_corpus(utts, 0.1, 0.2, 0)
    assert (len(tr), len(dv), len(te)) == (70, 10, 20)
    assert not ({u.id for u in tr} & {u.id for u in te})


word = st.text(alphabet="abc-,.!", min_size=1, max_size=4)


@given(st.lists(word, max_size=8))
def test_normalize_idempotent(words):
    u = Utterance.from_words("x", words, [O] * len(words))
    once = normalize(u)
    assert normalize(once) == once
    assert all(not (t.is_partial or t.is_punct) for t in once.tokens)


@given(st.lists(st.tuples(st.sampled_from(["a", "b", "uh", "to"]), st.sampled_from("OEF")),
                min_size=1, max_size=6), st.integers(1, 4))
def test_tsv_round_trip(rows, n):
    utts = [Utterance.from_words(f"id{i}", [w for w, _ in rows], [l for _, l in rows]) for i in range(n)]
    text = format_tsv(utts)
    assert parse_annotated(text) == utts
    assert format_tsv(parse_annotated(text)) == text


def _truth():
    return reference_channel(ToyGrammar(0).vocabulary())


def test_synthesize_rate_zero_identity():
    fluent = fluent_corpus(30, seed=2)
    out = synthesize_corpus(fluent, _truth(), 0.0, seed=5)
    assert [u.words for u in out] == [u.words for u in fluent]
    assert all(set(u.gold) == {O} for u in out)


def test_synthesize_deterministic_and_labelled():
    fluent = fluent_corpus(200, seed=2)
    a = synthesize_corpus(fluent, _truth(), 0.5, seed=5)
    b = synthesize_corpus(fluent, _truth(), 0.5, seed=5)
    assert a == b
    injected = [u for u in a if E in u.gold]
    assert 60 < len(injected) < 140
    for u, src in zip(a, fluent):
        # deleting the injected material gives back the source sentence
        assert u.fluent_words() == src.words


def test_synthesize_copy_injection():
    truth = _truth()
    copy_only = {p: {"COPY": 0.97, "SUBSTITUTE": 0.01, "INSERT": 0.01, "DELETE": 0.01} for p in truth.p_op}
    import dataclasses
    model = dataclasses.replace(truth, p_op=copy_only, p_stop=0.999)
    src = [Utterance.from_words("s", ["a", "flight", "to", "denver"])]
    seen = set()
    for seed in range(40):
        [u] = synthesize_corpus(src, model, 1.0, seed=seed, interregnum_prob=0.0)
        if len(u) == 5:
            seen.add((u.words, "".join(l.value for l in u.gold)))
    assert (("a", "flight", "to", "to", "denver"), "OOEOO") in seen


def test_synthesize_rate_out_of_range():
    with pytest.raises(ValueError):
        synthesize_corpus([], _truth(), 1.5, 0)
