"""Command-line entry point (``disfluency <subcommand> ...``).

Any subcommand accepts ``--config FILE``: a JSON object whose keys are
option names (dashes or underscores) used as defaults; flags given on the
command line win.  Exit codes: 0 success, 1 usage, 2 data error, 3
numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import channel, corpus, evaluate, features, lstm, ngram, reranker
from .pipeline import (LM_KINDS, DIRECTION_CONDITIONS, LM_TYPE_CONDITIONS, ConfigError, PipelineConfig,
                       StageError, ablation_matrix, format_table, run_pipeline)
from .synthetic import fluent_corpus, reference_channel, ToyGrammar

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- file helpers ---------------------------------------------------------------

def _read_corpus(path: str, fmt: str = "tsv") -> list[corpus.Utterance]:
    with open(path, encoding="utf-8") as f:
        return corpus.parse_annotated(f, fmt)


def _write_text(path: str | None, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _load_binary(path: str):
    """Load any model file by its magic line."""
    with open(path, "rb") as f:
        head = f.read(5)
        f.seek(0)
        loaders = {ngram.MAGIC: ngram.NgramModel.load, lstm.MAGIC: lstm.LstmModel.load,
                   channel.MAGIC: channel.ChannelModel.load, reranker.MAGIC: reranker.RerankerModel.load}
        if head not in loaders:
            raise ValueError(f"{path}: unrecognised model file")
        return loaders[head](f)


def _save(model, path: str) -> None:
    buf = io.BytesIO()
    model.save(buf)
    Path(path).write_bytes(buf.getvalue())


def _parse_lm_args(lm_args: list[str]) -> list[tuple[str, str]]:
    out = []
    for item in lm_args:
        kind, _, path = item.partition("=")
        if kind not in LM_KINDS or not path:
            raise UsageError(f"--lm expects KIND=PATH with KIND in {LM_KINDS}, got {item!r}")
        out.append((kind, path))
    return out


def _lm_scores(cand_lists, lm_args: list[str]) -> list[list[dict]]:
    """Per-candidate {kind: logprob} from ``kind=path`` arguments."""
    models = {kind: _load_binary(path) for kind, path in _parse_lm_args(lm_args)}
    out = [[{} for _ in cl.candidates] for cl in cand_lists]
    for kind, model in models.items():
        sents = sorted({c.fluent for cl in cand_lists for c in cl.candidates})
        if isinstance(model, lstm.LstmModel):
            vals = lstm.lstm_logprob_batch(model, sents)
        elif kind.startswith("bwd"):
            vals = [model.logprob(s[::-1]) for s in sents]
        else:
            vals = [model.logprob(s) for s in sents]
        lp = dict(zip(sents, vals))
        for cl, rows in zip(cand_lists, out):
            for c, row in zip(cl.candidates, rows):
                row[kind] = lp[c.fluent]
    return out


def _read_cands(path: str, gold_path: str | None = None):
    gold = {u.id: corpus.normalize(u) for u in _read_corpus(gold_path)} if gold_path else None
    with open(path, encoding="utf-8") as f:
        return channel.read_candidates(f, gold=gold)


def _feature_rows(path: str) -> dict[str, list[dict]]:
    with open(path, encoding="utf-8") as f:
        rows = features.read_features(f)
    grouped: dict[str, dict[int, dict]] = {}
    for uid, k, vec in rows:
        grouped.setdefault(uid, {})[k] = vec
    return {uid: [d[k] for k in sorted(d)] for uid, d in grouped.items()}


# -- subcommands ----------------------------------------------------------------

def cmd_normalize(a):
    utts = [corpus.normalize(u) for u in _read_corpus(a.input, a.format)]
    _write_text(a.output, corpus.format_tsv(utts))


def cmd_synth(a):
    if a.fluent:
        fluent = [corpus.Utterance.from_words(u.id, u.words) for u in _read_corpus(a.fluent)]
        vocab = sorted({w for u in fluent for w in u.words})
    else:
        fluent = fluent_corpus(a.n, a.seed)
        vocab = ToyGrammar(a.seed).vocabulary()
    params = _load_binary(a.channel) if a.channel else reference_channel(vocab)
    utts = corpus.synthesize_corpus(fluent, params, a.rate, a.seed + 1, a.interregnum_prob,
                                    min_repair=a.min_repair)
    _write_text(a.output, corpus.format_tsv(utts))


def cmd_train_channel(a):
    utts = [corpus.normalize(u) for u in _read_corpus(a.input, a.format)]
    model = channel.train_channel(utts, alpha=a.alpha, p_filler=a.p_filler, em_iterations=a.em_iterations)
    _save(model, a.output)


def cmd_train_ngram(a):
    utts = [corpus.normalize(u) for u in _read_corpus(a.input, a.format)]
    sents = [u.fluent_words() if u.gold is not None else u.words for u in utts]
    if a.reverse:
        sents = ngram.reversed_sentences(sents)
    _save(ngram.train_ngram(sents, a.order, a.min_count), a.output)


def cmd_train_lstm(a):
    utts = [corpus.normalize(u) for u in _read_corpus(a.input, a.format)]
    overrides = {k: getattr(a, k) for k in ("hidden", "embed", "layers", "epochs", "batch",
                                            "bptt_window", "seed", "lr0") if getattr(a, k) is not None}
    direction = lstm.Direction[a.direction.upper()]
    cfg = (lstm.LstmConfig.full if a.preset == "full" else lstm.LstmConfig.desk)(direction=direction, **overrides)
    model = lstm.train_lstm(utts, cfg, log=lambda m: logging.info(m))
    _save(model, a.output)


def cmd_nbest(a):
    utts = [corpus.normalize(u) for u in _read_corpus(a.input, a.format)]
    ch = _load_binary(a.channel)
    lm = _load_binary(a.bigram)
    lists = [channel.nbest(u, ch, lm, a.n, a.beam, a.max_regions, a.max_reparandum) for u in utts]
    buf = io.StringIO()
    channel.write_candidates(lists, buf)
    _write_text(a.output, buf.getvalue())


def cmd_extract_features(a):
    required = [kind for kind, _ in _parse_lm_args(a.lm or [])]
    lists = _read_cands(a.candidates)
    scores = _lm_scores(lists, a.lm or [])
    rows = []
    for cl, sc in zip(lists, scores):
        for k, vec in enumerate(features.extract_list(cl, sc, required)):
            rows.append((cl.utterance.id, k, vec))
    buf = io.StringIO()
    features.write_features(rows, buf)
    _write_text(a.output, buf.getvalue())


def _instances(cands_path, gold_path, feats_path):
    lists = _read_cands(cands_path, gold_path)
    feats = _feature_rows(feats_path)
    out = []
    for cl in lists:
        if cl.utterance.gold is None:
            raise ValueError(f"no gold labels for {cl.utterance.id}")
        vecs = feats.get(cl.utterance.id)
        if vecs is None or len(vecs) != len(cl.candidates):
            raise ValueError(f"features do not match the candidates of {cl.utterance.id}")
        out.append(reranker.make_instance(cl, vecs))
    return out


def cmd_train_reranker(a):
    train = _instances(a.candidates, a.gold, a.features)
    if a.dev_candidates:
        dev = _instances(a.dev_candidates, a.dev_gold, a.dev_features)
        model, lam, table = reranker.tune_lambda(train, dev, a.lambdas, a.iterations)
        for l, f in table:
            logging.info("lambda %g dev f-score %.4f", l, f)
    else:
        model = reranker.train_reranker(train, a.lambdas[0], a.iterations)
    _save(model, a.output)


def cmd_predict(a):
    lists = _read_cands(a.candidates)
    if a.model:
        model = _load_binary(a.model)
        feats = _feature_rows(a.features) if a.features else {}
        chosen = []
        for cl in lists:
            vecs = feats.get(cl.utterance.id) or features.extract_list(cl, [{} for _ in cl.candidates])
            chosen.append(cl.candidates[reranker.select(model, vecs)])
    else:
        chosen = [cl.candidates[0] for cl in lists]
    utts = [corpus.Utterance(cl.utterance.id, cl.utterance.tokens, c.labels) for cl, c in zip(lists, chosen)]
    _write_text(a.output, corpus.format_tsv(utts))


def cmd_evaluate(a):
    pred = {u.id: u.gold for u in _read_corpus(a.predicted)}
    gold = {u.id: u.gold for u in (corpus.normalize(x) for x in _read_corpus(a.gold, a.format))}
    report = evaluate.score(pred, gold)
    print(report.table())
    if a.json:
        _write_text(a.json, report.to_json() + "\n")


def _pipeline_config(a) -> PipelineConfig:
    d = dict(a.pipeline_defaults)
    for f in dataclasses.fields(PipelineConfig):
        v = getattr(a, "p_" + f.name, None)
        if v is not None:
            d[f.name] = v
    return PipelineConfig.from_dict(d)


def cmd_run(a):
    cfg = _pipeline_config(a)
    result = run_pipeline(cfg, a.out)
    print(result.report.table())


def cmd_ablate(a):
    cfg = _pipeline_config(a)
    conditions = {"direction": DIRECTION_CONDITIONS, "lm-type": LM_TYPE_CONDITIONS}[a.conditions]
    table = format_table(ablation_matrix(cfg, conditions))
    print(table)
    if a.output:
        _write_text(a.output, table + "\n")


# -- parser -----------------------------------------------------------------------

def _pipeline_flags(p):
    for f in dataclasses.fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool",):
            p.add_argument(flag, dest="p_" + f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.name in ("synth", "lstm"):
            p.add_argument(flag, dest="p_" + f.name, type=json.loads, default=None, help="JSON object")
        elif f.name == "lambda_grid":
            p.add_argument(flag, dest="p_" + f.name, type=float, nargs="+", default=None)
        else:
            kind = {"int": int, "float": float}.get(f.type, str)
            p.add_argument(flag, dest="p_" + f.name, type=kind, default=None)


def build_parser() -> Parser:
    p = Parser(prog="disfluency", description="Noisy-channel disfluency detection with LM reranking.")
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        return sp

    s = add("normalize", cmd_normalize, "drop partial words and punctuation, lowercase")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=["tsv", "dps"], default="tsv")
    s.add_argument("--output")

    s = add("synth", cmd_synth, "inject disfluencies into a fluent corpus")
    s.add_argument("--fluent", help="fluent TSV (default: toy grammar sentences)")
    s.add_argument("--channel", help="channel model supplying the injection parameters")
    s.add_argument("--n", type=int, default=5000)
    s.add_argument("--rate", type=float, default=0.15)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--interregnum-prob", type=float, default=0.3)
    s.add_argument("--min-repair", type=int, default=1)
    s.add_argument("--output")

    s = add("train-channel", cmd_train_channel, "estimate the channel model")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=["tsv", "dps"], default="tsv")
    s.add_argument("--alpha", type=float, default=0.1)
    s.add_argument("--p-filler", type=float, default=0.5)
    s.add_argument("--em-iterations", type=int, default=0)
    s.add_argument("--output", required=True)

    s = add("train-ngram", cmd_train_ngram, "train a Kneser-Ney n-gram LM")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=["tsv", "dps"], default="tsv")
    s.add_argument("--order", type=int, default=4)
    s.add_argument("--min-count", type=int, default=1)
    s.add_argument("--reverse", action="store_true", help="train on reversed sentences")
    s.add_argument("--output", required=True)

    s = add("train-lstm", cmd_train_lstm, "train an LSTM LM")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=["tsv", "dps"], default="tsv")
    s.add_argument("--direction", choices=["forward", "backward"], default="forward")
    s.add_argument("--preset", choices=["desk", "full"], default="desk")
    for name in ("hidden", "embed", "layers", "epochs", "batch", "bptt-window", "seed"):
        s.add_argument("--" + name, type=int)
    s.add_argument("--lr0", type=float)
    s.add_argument("--output", required=True)

    s = add("nbest", cmd_nbest, "n-best analyses from the channel model")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=["tsv", "dps"], default="tsv")
    s.add_argument("--channel", required=True)
    s.add_argument("--bigram", required=True)
    s.add_argument("--n", type=int, default=25)
    s.add_argument("--beam", type=int, default=100)
    s.add_argument("--max-regions", type=int, default=3)
    s.add_argument("--max-reparandum", type=int, default=8)
    s.add_argument("--output")

    s = add("extract-features", cmd_extract_features, "reranker features for candidate lists")
    s.add_argument("--candidates", required=True)
    s.add_argument("--lm", action="append", metavar="KIND=PATH",
                   help=f"LM score feature, KIND in {', '.join(LM_KINDS)}")
    s.add_argument("--output")

    s = add("train-reranker", cmd_train_reranker, "train the expected f-score reranker")
    s.add_argument("--candidates", required=True)
    s.add_argument("--gold", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--dev-candidates")
    s.add_argument("--dev-gold")
    s.add_argument("--dev-features")
    s.add_argument("--lambdas", type=float, nargs="+", default=[1e-4, 1e-3, 1e-2])
    s.add_argument("--iterations", type=int, default=200)
    s.add_argument("--output", required=True)

    s = add("predict", cmd_predict, "pick one analysis per utterance")
    s.add_argument("--candidates", required=True)
    s.add_argument("--features")
    s.add_argument("--model", help="reranker model (omit for the NCM first-best)")
    s.add_argument("--output")

    s = add("evaluate", cmd_evaluate, "edited-word f-score and error rate")
    s.add_argument("--predicted", required=True)
    s.add_argument("--gold", required=True)
    s.add_argument("--format", choices=["tsv", "dps"], default="tsv")
    s.add_argument("--json")

    s = add("run", cmd_run, "full pipeline from a config")
    _pipeline_flags(s)
    s.add_argument("--out", default="out")

    s = add("ablate", cmd_ablate, "LM-feature ablation table")
    _pipeline_flags(s)
    s.add_argument("--conditions", choices=["direction", "lm-type"], default="direction")
    s.add_argument("--output")
    return p


def _config_defaults(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    with open(known.config, encoding="utf-8") as f:
        d = json.load(f)
    if not isinstance(d, dict):
        raise UsageError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in d.items()}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        defaults = _config_defaults(argv)
    except (OSError, ValueError, UsageError) as e:
        print(f"disfluency: bad config: {e}", file=sys.stderr)
        return EXIT_USAGE
    parser = build_parser()
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            known = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in defaults.items() if k in known})
            sp.set_defaults(pipeline_defaults={k: v for k, v in defaults.items()
                                               if k in {f.name for f in dataclasses.fields(PipelineConfig)}})
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    try:
        a.func(a)
    except (UsageError, ConfigError) as e:
        print(f"disfluency: {e}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as e:
        print(f"disfluency: {e}", file=sys.stderr)
        return EXIT_NUMERIC if _numeric(e.cause) else EXIT_DATA
    except Exception as e:  # noqa: BLE001 - mapped to exit codes
        if _numeric(e):
            print(f"disfluency: numeric failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(e, (OSError, ValueError, KeyError, json.JSONDecodeError)):
            print(f"disfluency: {type(e).__name__}: {e}", file=sys.stderr)
            return EXIT_DATA
        raise
    return EXIT_OK


def _numeric(e: BaseException) -> bool:
    return isinstance(e, (FloatingPointError, OverflowError, ZeroDivisionError, np.linalg.LinAlgError))


if __name__ == "__main__":
    sys.exit(main())
