import json

import pytest

from retvqa import cli
from retvqa.config import DEFAULTS, apply_override, load_config
from retvqa.synthworld import ConfigError


def test_overrides_win_over_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"generator": {"d": 32, "n_heads": 4}, "seed": 3}))
    cfg = load_config(p, ["generator.d=64", "data.pool_size=20"], workdir=tmp_path)
    assert cfg["generator"]["d"] == 64 and cfg["seed"] == 3 and cfg["data"]["pool_size"] == 20
    assert DEFAULTS["data"]["pool_size"] == 10


def test_bad_config_values():
    with pytest.raises(ConfigError):
        load_config(overrides=["generator.nope=1"])
    with pytest.raises(ConfigError):
        load_config(overrides=["generator.d=30"])
    with pytest.raises(ConfigError):
        apply_override({"a": 1}, "a")


def test_workdir_env(monkeypatch, tmp_path):
    monkeypatch.setenv("RETVQA_WORKDIR", str(tmp_path / "w"))
    assert load_config()["workdir"] == str(tmp_path / "w")


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["train", "pretrain-rel", "--workdir", str(tmp_path)]) == 3
    assert "gen-data" in capsys.readouterr().err
    assert cli.main(["gen-data", "--workdir", str(tmp_path), "--set", "data.pool_size=1"]) == 2
    assert cli.main(["eval", "oracle", "--workdir", str(tmp_path)]) == 3


def test_gen_data_small_and_idempotent(tmp_path):
    args = ["gen-data", "--workdir", str(tmp_path), "--set", "data.n_scenes=200",
            "--set", "data.n_questions=50"]
    assert cli.main(args) == 0
    first = (tmp_path / "data" / "dataset.jsonl").read_bytes()
    assert cli.main(args) == 0
    assert (tmp_path / "data" / "dataset.jsonl").read_bytes() == first
    stats = json.loads((tmp_path / "data" / "stats.json").read_text())
    assert stats["n_questions"] == 50 and stats["avg_relevant_per_question"] == 2.0
    assert cli.main(["train", "train-baselines", "--workdir", str(tmp_path),
                     "--set", "baselines.epochs=1"]) == 0
    assert cli.main(["eval", "oracle", "--method", "popularity-global", "--workdir", str(tmp_path)]) == 0
    assert cli.main(["eval", "retrieved", "--method", "popularity-global", "--workdir",
                     str(tmp_path)]) == 3
    assert cli.main(["report", "--workdir", str(tmp_path)]) == 0
    assert (tmp_path / "report.md").exists()


def test_full_pipeline_tiny(tmp_path):
    tiny = ["--workdir", str(tmp_path), "--set", "data.n_scenes=120", "--set", "data.n_questions=40",
            "--set", "pretrain.steps=4", "--set", "finetune.epochs=1", "--set", "relevance.n_layers=1",
            "--set", "generator.n_enc_layers=1", "--set", "generator.n_dec_layers=1",
            "--set", "qa_train.epochs=1", "--set", "qa_train.grounding_epochs=1",
            "--set", "ablate.pool_sizes=[5,10]", "--set", "ablate.seeds=[0]", "--set", "ablate.n_questions=8"]
    for cmd in (["gen-data"], ["train", "pretrain-rel"], ["train", "finetune-rel"], ["train", "train-qa"],
                ["train", "train-qa", "--resume", "--set", "qa_train.epochs=2"],
                ["train", "train-qa", "--variant", "question-only"],
                ["eval", "oracle", "--method", "mibart"], ["eval", "retrieved", "--method", "mibart"],
                ["ablate", "top1-vs-topk"], ["ablate", "pool-size"], ["report"]):
        assert cli.main(cmd + tiny) == 0, cmd
    summary = json.loads((tmp_path / "qa" / "mibart.json").read_text())
    assert summary["steps"] > 0
    assert (tmp_path / "qa" / "mibart_warmup_log.csv").exists()
    assert not (tmp_path / "qa" / "question-only_warmup_log.csv").exists()
    rows = json.loads((tmp_path / "ablate" / "pool-size.json").read_text())["rows"]
    assert sorted(r["pool_size"] for r in rows) == [5, 10]
    report = json.loads((tmp_path / "eval" / "retrieved" / "mibart.json").read_text())
    assert 0.0 <= report["qa"]["fxa"] <= 1.0
