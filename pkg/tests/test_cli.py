import json
import subprocess
import sys

import pytest

from disfluency.cli import main
from disfluency.corpus import parse_annotated


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "--n", 60, "--rate", 0.4, "--seed", 2, "--output", d / "train.tsv") == 0
    assert run("synth", "--n", 20, "--rate", 0.4, "--seed", 9, "--output", d / "test.tsv") == 0
    return d


def test_full_chain(files):
    d = files
    assert run("normalize", "--input", d / "train.tsv", "--output", d / "norm.tsv") == 0
    assert run("train-channel", "--input", d / "norm.tsv", "--output", d / "ch.dfch") == 0
    assert run("train-ngram", "--input", d / "norm.tsv", "--order", 2, "--output", d / "bi.dfng") == 0
    assert run("train-ngram", "--input", d / "norm.tsv", "--reverse", "--output", d / "b4.dfng") == 0
    assert run("train-lstm", "--input", d / "norm.tsv", "--hidden", 4, "--embed", 4, "--epochs", 1,
               "--output", d / "f.dfls") == 0
    for name in ("train", "test"):
        assert run("nbest", "--input", d / f"{name}.tsv", "--channel", d / "ch.dfch",
                   "--bigram", d / "bi.dfng", "--n", 5, "--beam", 30, "--output", d / f"{name}.cands") == 0
        assert run("extract-features", "--candidates", d / f"{name}.cands", "--lm", f"fwd_lstm={d / 'f.dfls'}",
                   "--lm", f"bwd_4g={d / 'b4.dfng'}", "--output", d / f"{name}.feats") == 0
    assert run("train-reranker", "--candidates", d / "train.cands", "--gold", d / "train.tsv",
               "--features", d / "train.feats", "--iterations", 20, "--output", d / "rr.dfrr") == 0
    assert run("predict", "--candidates", d / "test.cands", "--features", d / "test.feats",
               "--model", d / "rr.dfrr", "--output", d / "pred.tsv") == 0
    assert run("evaluate", "--predicted", d / "pred.tsv", "--gold", d / "test.tsv", "--json", d / "eval.json") == 0
    assert 0.0 <= json.loads((d / "eval.json").read_text())["f_score"] <= 1.0
    with open(d / "pred.tsv", encoding="utf-8") as f:
        assert len(parse_annotated(f)) == 20


def test_usage_errors_exit_1(files):
    assert run("no-such-command") == 1
    assert run("train-ngram", "--input", files / "train.tsv") == 1
    assert run("extract-features", "--candidates", files / "train.tsv", "--lm", "bogus") == 1
    assert run("run", "--synth", '{"n": 10}', "--n-best", 0, "--work-dir", files / "w") == 1


def test_data_errors_exit_2(files, tmp_path):
    assert run("train-ngram", "--input", tmp_path / "missing.tsv", "--output", tmp_path / "x") == 2
    bad = tmp_path / "bad.tsv"
    bad.write_text("garbage line without tabs\n")
    assert run("normalize", "--input", bad) == 2
    assert run("nbest", "--input", files / "train.tsv", "--channel", bad, "--bigram", bad) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_3(files, tmp_path):
    assert run("train-lstm", "--input", files / "train.tsv", "--hidden", 4, "--embed", 4, "--epochs", 2,
               "--lr0", 1e308, "--output", tmp_path / "x.dfls") == 3


def test_config_file_defaults_and_override(files, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"order": 1, "min-count": 1}))
    assert run("--config", cfg, "train-ngram", "--input", files / "train.tsv", "--output", tmp_path / "a") == 0
    assert (tmp_path / "a").read_bytes().split(b"\n")[1].find(b'"order":1') >= 0
    assert run("--config", cfg, "train-ngram", "--input", files / "train.tsv", "--order", 3,
               "--output", tmp_path / "b") == 0
    assert b'"order":3' in (tmp_path / "b").read_bytes()
    cfg.write_text("[1, 2]")
    assert run("--config", cfg, "normalize", "--input", files / "train.tsv") == 1


def test_run_and_ablate_from_config(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"synth": {"n": 80, "rate": 0.3, "seed": 3}, "k_folds": 2, "n_best": 3,
                               "beam": 20, "fwd_lstm": False, "bwd_lstm": False, "fwd_4g": True,
                               "reranker_iterations": 10, "work_dir": str(tmp_path / "w")}))
    assert run("--config", cfg, "run", "--out", tmp_path / "out", "--n-best", 4) == 0
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert "test" in rep
    assert run("--config", cfg, "ablate", "--conditions", "lm-type", "--no-fwd-lstm",
               "--lstm", '{"hidden": 4, "embed": 4, "epochs": 1}', "--output", tmp_path / "t.txt") == 0
    assert len((tmp_path / "t.txt").read_text().splitlines()) == 4


def test_console_script_module_entry():
    out = subprocess.run([sys.executable, "-m", "disfluency.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "ablate" in out.stdout
