import csv
import json

import pytest

from xmdistill.checkpoint import load_checkpoint
from xmdistill.cli import emit_report, main
from xmdistill.config import parse_config
from xmdistill.errors import ConfigError, ContractError
from xmdistill.evaluation import MetricReport

TINY = {
    "student": {"conv_layers": [[8, 8, 4], [8, 4, 2]], "d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 16,
                "d_embed": 16},
    "data": {"d_embed": 16, "n_examples": 80, "heldout_examples": 16},
    "train": {"total_steps": 20, "peak_lr": 1e-3, "batch_size": 4, "checkpoint_every": 2, "log_every": 5},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "tiny.json").write_text(json.dumps(TINY))
    return tmp_path


def run(*args):
    return main([*args, "--config", "tiny.json"])


@pytest.fixture
def trained(workdir):
    assert run("gen-data", "--out", "data") == 0
    assert run("pretrain", "--paths.dataset", "data/dataset.xmdd", "--paths.heldout", "data/heldout.xmdd",
               "--out", "run") == 0
    return workdir


# config parsing

def test_defaults():
    cfg = parse_config("gen-data")
    assert cfg.ridge.alpha == 100.0
    assert cfg.train.betas == (0.9, 0.999)
    assert cfg.train.warmup_steps == 5000 and cfg.train.total_steps == 50000
    assert cfg.threads == 1 and cfg.seed == 0
    ft = parse_config("finetune", overrides={"train": {"total_steps": 300}, "paths": {"dataset": "."}})
    assert ft.train.warmup_steps == 30 and ft.train.batch_size == 8


def test_explicit_warmup_wins_and_conflict_rejected():
    assert parse_config("gen-data", overrides={"train": {"warmup_steps": 7}}).train.warmup_steps == 7
    assert parse_config("gen-data", overrides={"train": {"warmup_fraction": 0.5, "total_steps": 10}}) \
        .train.warmup_steps == 5
    with pytest.raises(ConfigError, match="warmup_fraction"):
        parse_config("gen-data", overrides={"train": {"warmup_steps": 7, "warmup_fraction": 0.5}})


def test_unknown_key_named(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"lr_peek": 1e-3}}))
    with pytest.raises(ConfigError, match="lr_peek"):
        parse_config("gen-data", path)
    with pytest.raises(ConfigError, match="bogus"):
        parse_config("gen-data", overrides={"bogus": {}})


def test_flag_overrides_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"peak_lr": 0.5}, "seed": 4}))
    cfg = parse_config("gen-data", path, {"train": {"peak_lr": 0.25}}, {"seed": 9})
    assert cfg.train.peak_lr == 0.25 and cfg.seed == 9
    assert cfg.train.seed == 9 and cfg.data.seed == 9


def test_type_mismatch_names_key():
    with pytest.raises(ConfigError, match="train.total_steps"):
        parse_config("gen-data", overrides={"train": {"total_steps": "many"}})
    with pytest.raises(ConfigError, match="student.d_model"):
        parse_config("gen-data", overrides={"student": {"d_model": 33}})


def test_missing_input_path():
    with pytest.raises(ConfigError, match="paths.dataset"):
        parse_config("probe")
    with pytest.raises(ConfigError, match="paths.dataset"):
        parse_config("probe", overrides={"paths": {"dataset": "/no/such/file.xmdd"}})


# reports

def _rep(k, seed, acc):
    return MetricReport("t", {"accuracy": acc, "weighted_f1": acc / 2}, {"k": k, "sample_seed": seed})


def test_emit_report_csv_and_jsonl(tmp_path):
    jl, cs = emit_report([_rep(4, 0, 0.5), _rep(8, 1, 0.75)], tmp_path / "sweep.jsonl", csv_metrics={"accuracy"})
    rows = list(csv.reader(cs.open()))
    assert rows[0] == ["k", "seed", "metric", "value"]
    assert rows[1:] == [["4", "0", "accuracy", "0.5"], ["8", "1", "accuracy", "0.75"]]
    assert [json.loads(line)["metrics"]["accuracy"] for line in jl.read_text().splitlines()] == [0.5, 0.75]
    again = emit_report([_rep(4, 0, 0.5), _rep(8, 1, 0.75)], tmp_path / "b.jsonl", csv_metrics={"accuracy"})
    assert again[0].read_bytes() == jl.read_bytes() and again[1].read_bytes() == cs.read_bytes()


def test_emit_report_empty_sweep(tmp_path):
    with pytest.raises(ContractError):
        emit_report([], tmp_path / "x.jsonl")
    assert not list(tmp_path.iterdir())


# commands

def test_usage_errors_exit_1(workdir, capsys):
    assert main(["pretrain", "--train.lr_peek", "1"]) == 1
    assert "lr_peek" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main(["gen-data", "--seed", "x"]) == 1


def test_data_error_exit_2(workdir):
    (workdir / "bad.xmdd").write_bytes(b'{"count":1,"magic":"XMDD","version":1}\n')
    assert run("probe", "--paths.dataset", "bad.xmdd", "--eval.random_init", "true") == 2


def test_numeric_error_exit_3(workdir):
    assert run("gen-data", "--data.n_examples", "20", "--out", "d") == 0
    # 12 training rows cannot pin down 17 unknowns without a penalty
    assert run("probe", "--paths.dataset", "d/dataset.xmdd", "--eval.random_init", "true",
               "--ridge.alpha", "0") == 3


def test_pipeline(trained, capsys):
    ds = (trained / "data/dataset.xmdd").read_bytes()
    log = (trained / "run/train_log.jsonl").read_text().splitlines()
    assert len(log) == 20 and {"step", "lr", "loss"} <= set(json.loads(log[0]))
    assert len(list((trained / "run").glob("ckpt_*.xmdc"))) == 10
    assert run("avg-ckpt", "--paths.run_dir", "run", "--out", "avg") == 0
    avg = load_checkpoint(trained / "avg/averaged.xmdc")
    assert avg.step == 20
    assert (trained / "avg/student_config.json").exists()
    assert run("probe", "--paths.dataset", "data/dataset.xmdd", "--paths.checkpoint", "avg/averaged.xmdc",
               "--out", "p") == 0
    rep = json.loads((trained / "p/probe.jsonl").read_text())
    assert rep["provenance"]["checkpoint_step"] == 20
    assert len(rep["provenance"]["config_digest"]) == 64
    assert (trained / "data/dataset.xmdd").read_bytes() == ds


def test_fewshot_sweep_rows(trained):
    assert run("fewshot", "--paths.dataset", "data/dataset.xmdd", "--paths.checkpoint", "run/final.xmdc",
               "--fewshot.ks", "[1,2,3]", "--fewshot.seeds", "2", "--out", "fs") == 0
    rows = list(csv.DictReader((trained / "fs/fewshot.csv").open()))
    assert [(r["k"], r["seed"]) for r in rows] == [(str(k), str(s)) for k in (1, 2, 3) for s in (0, 1)]
    assert {r["metric"] for r in rows} == {"accuracy"}


def test_fewshot_too_large_k_is_data_error(trained):
    assert run("fewshot", "--paths.dataset", "data/dataset.xmdd", "--paths.checkpoint", "run/final.xmdc",
               "--fewshot.ks", "[32]", "--out", "fs") == 2


def test_finetune_command(trained):
    assert run("finetune", "--paths.dataset", "data/dataset.xmdd", "--paths.checkpoint", "run/final.xmdc",
               "--train.total_steps", "6", "--train.checkpoint_every", "3", "--eval.freeze_encoder=true",
               "--out", "ft") == 0
    rep = json.loads((trained / "ft/finetune.jsonl").read_text())
    assert rep["provenance"]["freeze_encoder"] is True and "averaged" in rep["variants"]
    assert len((trained / "ft/finetune_log.jsonl").read_text().splitlines()) == 6


def test_mismatched_student_config_rejected(trained):
    assert run("probe", "--paths.dataset", "data/dataset.xmdd", "--paths.checkpoint", "run/final.xmdc",
               "--student.d_ff", "32", "--out", "p") == 2


def test_grad_check_command(workdir):
    assert main(["grad-check", "--out", "gc"]) == 0
    report = json.loads((workdir / "gc/gradcheck.json").read_text())
    assert report["passed"] and report["max_relative_error"] <= 1e-4
    assert {"conv1d", "layer_norm", "infonce_loss", "matmul"} <= set(report["primitives"])
