"""End-to-end experiment runner: NCM n-best -> LM scoring -> reranking -> eval.

Every stage writes its outputs under ``<work_dir>/cache/<stage>-<key>/``
where ``key`` hashes the settings the stage depends on (including upstream
keys), so re-runs and ablations reuse finished stages.  Files are written
to a temporary name and renamed into place.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .channel import CandidateList, ChannelModel, nbest, read_candidates, train_channel, write_candidates
from .corpus import (CorpusSplit, Utterance, make_folds, normalize, parse_annotated, read_id_list,
                     split_corpus, write_tsv)
from .evaluate import EvalReport, score
from .features import SCORE_KEYS, extract_list
from .lstm import Direction, LstmConfig, LstmModel, lstm_logprob_batch, train_lstm
from .ngram import NgramModel, train_ngram
from .reranker import RerankerModel, make_instance, select, train_reranker, tune_lambda
from .synthetic import synthetic_corpus

log = logging.getLogger(__name__)

LM_KINDS = SCORE_KEYS  # fwd_lstm, bwd_lstm, fwd_4g, bwd_4g


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    """A component failure tagged with the pipeline stage it happened in."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    # data: either an annotated corpus file or a synthetic corpus description
    corpus: str | None = None
    corpus_format: str = "tsv"
    train_ids: str | None = None
    dev_ids: str | None = None
    test_ids: str | None = None
    synth: dict | None = None          # {"n", "rate", "seed", "interregnum_prob", "min_repair"}
    dev_frac: float = 0.1
    test_frac: float = 0.1
    split_seed: int = 0
    # noisy channel
    n_best: int = 25
    beam: int = 100
    max_regions: int = 3
    max_reparandum: int = 8
    channel_alpha: float = 0.1
    channel_em_iterations: int = 0
    jackknife_ncm: bool = True
    # language models used as reranker features
    fwd_lstm: bool = True
    bwd_lstm: bool = True
    fwd_4g: bool = False
    bwd_4g: bool = False
    ngram_order: int = 4
    k_folds: int = 20
    fold_seed: int = 0
    lstm_preset: str = "desk"
    lstm: dict = field(default_factory=dict)
    # reranker
    rerank: bool = True
    lambda_grid: tuple = (1e-4, 1e-3, 1e-2)
    reranker_iterations: int = 200
    # output
    work_dir: str = "work"

    def __post_init__(self):
        self.lambda_grid = tuple(self.lambda_grid)

    @property
    def lms(self) -> tuple[str, ...]:
        return tuple(k for k in LM_KINDS if getattr(self, k))

    def with_lms(self, lms: Iterable[str], rerank: bool = True) -> "PipelineConfig":
        lms = set(lms)
        unknown = lms - set(LM_KINDS)
        if unknown:
            raise ConfigError(f"unknown LM kinds {sorted(unknown)}")
        return dataclasses.replace(self, rerank=rerank, **{k: k in lms for k in LM_KINDS})

    def lstm_config(self, direction: Direction) -> LstmConfig:
        presets = {"desk": LstmConfig.desk, "full": LstmConfig.full}
        return presets[self.lstm_preset](direction=direction, **self.lstm)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda_grid"] = list(self.lambda_grid)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PipelineConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def validate(self) -> None:
        """Check everything that can be checked before any training starts."""
        if (self.corpus is None) == (self.synth is None):
            raise ConfigError("give exactly one of 'corpus' and 'synth'")
        for name in ("corpus", "train_ids", "dev_ids", "test_ids"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name} path does not exist: {p}")
        if self.corpus_format not in ("tsv", "dps"):
            raise ConfigError(f"unknown corpus format {self.corpus_format!r}")
        if self.n_best < 1:
            raise ConfigError("n_best must be >= 1")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be >= 2")
        if self.lstm_preset not in ("desk", "full"):
            raise ConfigError(f"unknown LSTM preset {self.lstm_preset!r}")
        if not 0 <= self.dev_frac < 1 or not 0 <= self.test_frac < 1 or self.dev_frac + self.test_frac >= 1:
            raise ConfigError("dev_frac and test_frac must leave a non-empty training share")
        if not self.lambda_grid:
            raise ConfigError("lambda_grid is empty")
        if not 1 <= self.ngram_order <= 5:
            raise ConfigError("ngram_order must lie in 1..5")
        try:
            self.lstm_config(Direction.FORWARD)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad LSTM settings: {e}") from e


@dataclass
class Data:
    train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    split: CorpusSplit

    def by_id(self) -> dict[str, Utterance]:
        return {u.id: u for u in self.train + self.dev + self.test}


@dataclass
class PipelineResult:
    report: EvalReport            # test set
    dev_report: EvalReport
    l2_lambda: float | None
    lambda_table: list
    artifacts: dict[str, str]
    provenance: dict              # lm kind -> {uid: model tag}
    model_train_ids: dict         # lm kind -> {model tag: [train ids]}
    config_key: str
    model_paths: dict = field(default_factory=dict)  # lm kind -> {model tag: model file}

    def to_json(self) -> str:
        return json.dumps({
            "config_key": self.config_key,
            "test": self.report.summary(),
            "dev": self.dev_report.summary(),
            "l2_lambda": self.l2_lambda,
            "lambda_table": [[lam, f] for lam, f in self.lambda_table],
        }, indent=1, sort_keys=True)


# -- caching helpers ------------------------------------------------------------

def experiment_key(config: PipelineConfig) -> str:
    """Hash of every setting except where artifacts are stored."""
    d = config.to_dict()
    d.pop("work_dir")
    return _key(d)


def _key(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _ids_key(ids: Iterable[str]) -> str:
    return hashlib.sha256("\n".join(sorted(ids)).encode("utf-8")).hexdigest()[:16]


def _file_key(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:16]


def atomic_write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Cache:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root) / "cache"

    def path(self, stage: str, key: str, name: str) -> Path:
        return self.root / f"{stage}-{key}" / name

    def get_or_make(self, stage: str, key: str, name: str, make: Callable[[], bytes | str]) -> Path:
        p = self.path(stage, key, name)
        if not p.exists():
            try:
                data = make()
            except StageError:
                raise
            except Exception as e:
                raise StageError(stage, e) from e
            atomic_write(p, data)
        return p


def _bytes_of(save) -> bytes:
    buf = io.BytesIO()
    save(buf)
    return buf.getvalue()


# -- stages --------------------------------------------------------------------

def load_data(config: PipelineConfig) -> Data:
    if config.synth is not None:
        s = dict(config.synth)
        utts, _ = synthetic_corpus(int(s.get("n", 5000)), float(s.get("rate", 0.15)),
                                   int(s.get("seed", 0)), float(s.get("interregnum_prob", 0.3)),
                                   min_repair=int(s.get("min_repair", 1)))
    else:
        with open(config.corpus, encoding="utf-8") as f:
            utts = parse_annotated(f, config.corpus_format)
    utts = [normalize(u) for u in utts]
    utts = [u for u in utts if len(u)]
    if any(u.gold is None for u in utts):
        raise ConfigError("corpus utterances need gold labels")
    if config.train_ids or config.dev_ids or config.test_ids:
        by_id = {u.id: u for u in utts}

        def pick(path):
            if path is None:
                return []
            with open(path, encoding="utf-8") as f:
                ids = read_id_list(f)
            missing = [i for i in ids if i not in by_id]
            if missing:
                raise ConfigError(f"{path}: unknown utterance ids {missing[:5]}")
            return [by_id[i] for i in ids]
        dev, test = pick(config.dev_ids), pick(config.test_ids)
        if config.train_ids:
            train = pick(config.train_ids)
        else:
            held = {u.id for u in dev + test}
            train = [u for u in utts if u.id not in held]
    else:
        train, dev, test = split_corpus(utts, config.dev_frac, config.test_frac, config.split_seed)
    split = make_folds(train, config.k_folds, config.fold_seed,
                       dev=[u.id for u in dev], test=[u.id for u in test])
    return Data(train, dev, test, split)


def _fold_members(data: Data) -> list[list[Utterance]]:
    by_id = {u.id: u for u in data.train}
    return [[by_id[i] for i in sorted(fold)] for fold in data.split.folds]


def _complement(data: Data, fold: int) -> list[Utterance]:
    held = data.split.folds[fold]
    return [u for u in data.train if u.id not in held]


def _ncm_models(train: Sequence[Utterance], config: PipelineConfig) -> tuple[ChannelModel, NgramModel]:
    ch = train_channel(train, alpha=config.channel_alpha, em_iterations=config.channel_em_iterations)
    return ch, train_ngram(train, 2)


def _nbest_all(utts: Sequence[Utterance], ch: ChannelModel, lm: NgramModel,
               config: PipelineConfig) -> list[CandidateList]:
    return [nbest(u, ch, lm, config.n_best, config.beam, config.max_regions, config.max_reparandum)
            for u in utts]


def _jsonl(lists: Sequence[CandidateList]) -> str:
    buf = io.StringIO()
    write_candidates(lists, buf)
    return buf.getvalue()


def candidate_lists(data: Data, config: PipelineConfig, cache: Cache, data_key: str):
    """N-best lists for every split, plus the all-train channel and bigram files."""
    key = _key(data_key, config.n_best, config.beam, config.max_regions, config.max_reparandum,
               config.channel_alpha, config.channel_em_iterations, config.jackknife_ncm,
               config.k_folds, config.fold_seed)
    full: dict = {}

    def models():
        if not full:
            full["m"] = _ncm_models(data.train, config)
        return full["m"]

    paths = {
        "channel": cache.get_or_make("ncm", key, "channel.dfch", lambda: _bytes_of(models()[0].save)),
        "bigram": cache.get_or_make("ncm", key, "bigram.dfng", lambda: _bytes_of(models()[1].save)),
    }
    for name, utts in (("dev", data.dev), ("test", data.test)):
        paths[name] = cache.get_or_make("ncm", key, f"{name}.jsonl",
                                        lambda utts=utts: _jsonl(_nbest_all(utts, *models(), config)))

    def train_lists():
        if not config.jackknife_ncm:
            return _jsonl(_nbest_all(data.train, *models(), config))
        out = []
        for f, members in enumerate(_fold_members(data)):
            ch, lm = _ncm_models(_complement(data, f), config)
            out += _nbest_all(members, ch, lm, config)
        order = {u.id: i for i, u in enumerate(data.train)}
        out.sort(key=lambda cl: order[cl.utterance.id])
        return _jsonl(out)
    paths["train"] = cache.get_or_make("ncm", key, "train.jsonl", train_lists)
    gold = data.by_id()
    lists = {}
    for name in ("train", "dev", "test"):
        with open(paths[name], encoding="utf-8") as f:
            lists[name] = read_candidates(f, gold=gold)
    return lists, paths, key


def _train_lm(kind: str, utts: Sequence[Utterance], config: PipelineConfig):
    direction = Direction.FORWARD if kind.startswith("fwd") else Direction.BACKWARD
    if kind.endswith("lstm"):
        return train_lstm(utts, config.lstm_config(direction), train_ids=[u.id for u in utts])
    sents = [u.fluent_words() for u in utts]
    if direction is Direction.BACKWARD:
        sents = [s[::-1] for s in sents]
    return train_ngram(sents, config.ngram_order, min_count=2)


def _lm_settings(kind: str, config: PipelineConfig):
    if kind.endswith("lstm"):
        return config.lstm_config(Direction.FORWARD if kind.startswith("fwd") else Direction.BACKWARD).to_dict()
    return {"order": config.ngram_order}


def _load_lm(kind: str, path: Path):
    with open(path, "rb") as f:
        return LstmModel.load(f) if kind.endswith("lstm") else NgramModel.load(f)


def _score_strings(kind: str, model, sents: Sequence[tuple[str, ...]]) -> list[float]:
    if kind.endswith("lstm"):
        return lstm_logprob_batch(model, sents)
    if kind.startswith("bwd"):
        return [model.logprob(s[::-1]) for s in sents]
    return [model.logprob(s) for s in sents]


def lm_scores(kind: str, data: Data, lists: Mapping[str, Sequence[CandidateList]],
              config: PipelineConfig, cache: Cache, ncm_key: str):
    """Per-candidate scores from one LM kind, with the model tag that produced each.

    Training utterances in fold ``i`` are scored by a model trained on the
    other folds; dev and test by the model trained on all of train.
    """
    settings = _lm_settings(kind, config)
    jobs: list[tuple[str, list[Utterance], list[CandidateList]]] = []
    in_fold = [[] for _ in data.split.folds]
    for cl in lists["train"]:
        in_fold[data.split.fold_of(cl.utterance.id)].append(cl)
    for f in range(data.split.k):
        jobs.append((f"fold{f:02d}", _complement(data, f), in_fold[f]))
    jobs.append(("all", list(data.train), list(lists["dev"]) + list(lists["test"])))

    scores: dict[str, list[float]] = {}
    provenance: dict[str, str] = {}
    train_ids: dict[str, list[str]] = {}
    model_paths: dict[str, str] = {}
    for tag, train_utts, targets in jobs:
        ids = [u.id for u in train_utts]
        mkey = _key(kind, settings, _ids_key(ids))
        model_path = cache.get_or_make(
            "lm", mkey, "model.bin",
            lambda: _bytes_of(_train_lm(kind, train_utts, config).save))
        train_ids[tag] = sorted(ids)
        model_paths[tag] = str(model_path)
        if not targets:
            continue
        skey = _key(mkey, ncm_key, tag)

        def make_scores(model_path=model_path, targets=targets):
            model = _load_lm(kind, model_path)
            sents = sorted({c.fluent for cl in targets for c in cl.candidates})
            lp = dict(zip(sents, _score_strings(kind, model, sents)))
            return json.dumps({cl.utterance.id: [lp[c.fluent] for c in cl.candidates] for cl in targets},
                              sort_keys=True)
        score_path = cache.get_or_make("lmscore", skey, f"{kind}.json", make_scores)
        with open(score_path, encoding="utf-8") as fh:
            part = json.load(fh)
        for uid, vals in part.items():
            scores[uid] = vals
            provenance[uid] = tag
    return scores, provenance, train_ids, model_paths


def check_fold_discipline(provenance: Mapping[str, Mapping[str, str]],
                          model_train_ids: Mapping[str, Mapping[str, Sequence[str]]]) -> list[tuple]:
    """(kind, uid, tag) for every utterance scored by a model that saw it in training."""
    bad = []
    for kind, prov in provenance.items():
        seen = {tag: set(ids) for tag, ids in model_train_ids[kind].items()}
        for uid, tag in prov.items():
            if uid in seen[tag]:
                bad.append((kind, uid, tag))
    return bad


def _vectors(cl: CandidateList, lms: Sequence[str], all_scores) -> list[dict]:
    uid = cl.utterance.id
    per_cand = [{k: all_scores[k][uid][i] for k in lms} for i in range(len(cl.candidates))]
    return extract_list(cl, per_cand, required=lms)


def _report(preds: Sequence[CandidateList], chosen: Sequence[int]) -> EvalReport:
    return score([cl.candidates[k].labels for cl, k in zip(preds, chosen)],
                 [cl.utterance.gold for cl in preds], [cl.utterance.id for cl in preds])


def run_pipeline(config: PipelineConfig, out_dir: str | os.PathLike | None = None) -> PipelineResult:
    """Run (or resume) the full experiment; writes artifacts to ``out_dir``.

    ``rerank=False`` gives the NCM-alone condition (first candidate wins).
    With no LM flags set the reranker sees only NCM scores and surface flags.
    """
    config.validate()
    cache = Cache(config.work_dir)
    try:
        data = load_data(config)
    except (OSError, ValueError) as e:
        raise StageError("data", e) from e
    data_key = _key(config.corpus and _file_key(config.corpus), config.corpus_format, config.synth, config.train_ids, config.dev_ids,
                    config.test_ids, config.dev_frac, config.test_frac, config.split_seed)
    lists, paths, ncm_key = candidate_lists(data, config, cache, data_key)
    artifacts = {f"candidates_{k}" if k in ("train", "dev", "test") else k: str(v) for k, v in paths.items()}

    lms = config.lms if config.rerank else ()
    all_scores, provenance, model_ids, model_paths = {}, {}, {}, {}
    for kind in lms:
        (all_scores[kind], provenance[kind], model_ids[kind],
         model_paths[kind]) = lm_scores(kind, data, lists, config, cache, ncm_key)

    lam, table = None, []
    if config.rerank:
        run_key = _key(ncm_key, lms, {k: _lm_settings(k, config) for k in lms},
                       config.lambda_grid, config.reranker_iterations)
        train_inst = [make_instance(cl, _vectors(cl, lms, all_scores)) for cl in lists["train"]]
        dev_inst = [make_instance(cl, _vectors(cl, lms, all_scores)) for cl in lists["dev"]]

        def fit():
            if dev_inst:
                model, lam_, table_ = tune_lambda(train_inst, dev_inst, config.lambda_grid,
                                                  config.reranker_iterations)
            else:
                model = train_reranker(train_inst, config.lambda_grid[0], config.reranker_iterations)
                table_ = []
            return _bytes_of(model.save), table_
        rr_path = cache.path("rerank", run_key, "reranker.dfrr")
        table_path = cache.path("rerank", run_key, "lambda_table.json")
        if not (rr_path.exists() and table_path.exists()):
            try:
                blob, table = fit()
            except Exception as e:
                raise StageError("rerank", e) from e
            atomic_write(rr_path, blob)
            atomic_write(table_path, json.dumps(table))
        with open(rr_path, "rb") as f:
            reranker = RerankerModel.load(f)
        with open(table_path, encoding="utf-8") as f:
            table = [tuple(x) for x in json.load(f)]
        lam = reranker.l2_lambda
        artifacts["reranker"] = str(rr_path)

        def choose(cls):
            return [select(reranker, _vectors(cl, lms, all_scores)) for cl in cls]
    else:
        def choose(cls):
            return [0 for _ in cls]

    test_choice, dev_choice = choose(lists["test"]), choose(lists["dev"])
    result = PipelineResult(_report(lists["test"], test_choice), _report(lists["dev"], dev_choice),
                            lam, table, artifacts, provenance, model_ids, experiment_key(config),
                            model_paths)
    if out_dir is not None:
        write_outputs(result, data, lists, test_choice, Path(out_dir))
    return result


def write_outputs(result: PipelineResult, data: Data, lists, test_choice: Sequence[int], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name in ("channel", "bigram", "reranker", "candidates_train", "candidates_dev", "candidates_test"):
        if name in result.artifacts:
            src = Path(result.artifacts[name])
            dst = out / (name + src.suffix)
            shutil.copyfile(src, dst)
            result.artifacts[name] = str(dst)
    pred = [Utterance(cl.utterance.id, cl.utterance.tokens, cl.candidates[k].labels)
            for cl, k in zip(lists["test"], test_choice)]
    buf = io.StringIO()
    write_tsv(pred, buf)
    atomic_write(out / "predictions.tsv", buf.getvalue())
    atomic_write(out / "report.json", result.to_json() + "\n")
    atomic_write(out / "report.txt", result.report.table() + "\n")
    atomic_write(out / "eval.json", result.report.to_json() + "\n")
    atomic_write(out / "provenance.json", json.dumps(
        {"scored_by": result.provenance, "model_train_ids": result.model_train_ids},
        sort_keys=True) + "\n")
    result.artifacts.update({n: str(out / n) for n in
                             ("predictions.tsv", "report.json", "report.txt", "eval.json", "provenance.json")})


# -- ablations -------------------------------------------------------------------

DIRECTION_CONDITIONS = {
    "baseline": (),
    "forward": ("fwd_lstm",),
    "backward": ("bwd_lstm",),
    "both": ("fwd_lstm", "bwd_lstm"),
}

LM_TYPE_CONDITIONS = {
    "4-gram": ("fwd_4g", "bwd_4g"),
    "LSTM": ("fwd_lstm", "bwd_lstm"),
    "both": ("fwd_lstm", "bwd_lstm", "fwd_4g", "bwd_4g"),
}


def ablation_matrix(config: PipelineConfig,
                    conditions: Mapping[str, Sequence[str]] | None = None) -> list[tuple[str, EvalReport]]:
    """One test-set report per named LM-feature condition (NCM stages shared via the cache)."""
    conditions = DIRECTION_CONDITIONS if conditions is None else conditions
    rows = []
    for name, lms in conditions.items():
        rows.append((name, run_pipeline(config.with_lms(lms)).report))
    return rows


def format_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    if not rows:
        return ""
    width = max(12, max(len(n) for n, _ in rows) + 2)
    lines = [f"{'condition':<{width}}{'f-score':>9}{'error':>9}"]
    for name, rep in rows:
        lines.append(f"{name:<{width}}{rep.f_score * 100:9.2f}{rep.error_rate * 100:9.2f}")
    return "\n".join(lines)
