import json
from pathlib import Path

import pytest
import yaml

from gcrlab import cli
from gcrlab.config import ConfigError, RunConfig, from_dict, load_config, parse_override
from gcrlab.data import read_all
from gcrlab.evaluation import EvalReport, read_attention_csv
from gcrlab.experiments import read_curve

TINY = {
    "seed": 3,
    "schema": {"n_items": 60, "n_categories": 6, "n_brands": 8, "n_sellers": 10, "n_shops": 10,
               "n_queries": 5, "n_users": 12, "max_session_len": 5, "n": 12, "k": 4},
    "data": {"n_logged_train": 400, "n_logged_test": 300, "n_policy_train": 64, "n_policy_eval": 40},
    "critic": {"embed_dim": 4, "hidden_dim": 8, "gru_dim": 4},
    "critic_optimizer": {"epochs": 1},
    "policy": {"embed_dim": 4, "hidden_dim": 8, "sg_dim": 3},
    "trainer": {"m": 16, "n_batches": 3, "eval_contexts": 16},
    "eval": {"ips_episodes": 300, "entropy_contexts": 40},
}


def write_config(path: Path, **extra) -> Path:
    doc = {**TINY, **extra}
    path.write_text(yaml.safe_dump(doc))
    return path


def run(cfg_path, *args, out=None):
    argv = list(args) + ["--config", str(cfg_path), "--quiet"]
    if out is not None:
        argv += ["--output-dir", str(out)]
    return cli.main(argv)


def pipeline(cfg_path, out):
    assert run(cfg_path, "gen-data", out=out) == 0
    assert run(cfg_path, "train-critic", "--models", "grid", out=out) == 0
    assert run(cfg_path, "train-policy", "--algorithm", "reinforce-real", "--algorithm", "reinforce",
               "--algorithm", "ppo", "--algorithm", "ppo-exploration", out=out) == 0
    assert run(cfg_path, "evaluate", "--algorithm", "ppo-exploration", out=out) == 0
    # the packaged ten-item demo slate does not fit a k=4 critic
    assert run(cfg_path, "visualize-attention", out=out) == 2
    assert run(cfg_path, "visualize-attention", "--input", str(out / "data" / "logged_test.jsonl"), out=out) == 0
    assert run(cfg_path, "report", out=out) == 0


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "tiny.yaml")
    pipeline(cfg, root / "a")
    pipeline(cfg, root / "b")
    return cfg, root / "a", root / "b"


# config ----------------------------------------------------------------------

def test_defaults_match_headline_values():
    prov = RunConfig().provenance()
    assert prov == {"n": 50, "k": 10, "m": 64, "c": 1.0,
                    "loss_weights": {"pay": 50.0, "atc": 4.0, "click": 1.0, "impression": 0.05},
                    "negative_ratio": 1 / 50, "seed": 0}


def test_overrides_merge_into_nested_sections(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.yaml"), parse_override("critic.loss_weights.pay=20"))
    assert cfg.critic.loss_weights == {"pay": 20, "atc": 4.0, "click": 1.0, "impression": 0.05}
    assert cfg.schema.k == 4
    assert parse_override("trainer.c=0.5") == {"trainer": {"c": 0.5}}


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        from_dict({"trainer": {"learning_rate": 1}})
    with pytest.raises(ConfigError):
        from_dict({"seed": None})
    with pytest.raises(ConfigError):
        from_dict({"schema": {"n": 3, "k": 4}})
    with pytest.raises(ConfigError):
        from_dict({"trainer": {"gamma": 2.0}})
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")
    (tmp_path / "bad.yaml").write_text("seed: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_print_config_round_trips(capsys):
    assert cli.main(["print-config"]) == 0
    doc = yaml.safe_load(capsys.readouterr().out)
    assert from_dict(doc) == RunConfig()
    assert cli.main(["print-config", "--provenance", "--set", "trainer.m=32"]) == 0
    assert json.loads(capsys.readouterr().out)["m"] == 32


# exit codes ------------------------------------------------------------------

def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["no-such-command"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        cli.main(["train-policy", "--algorithm", "a2c"])
    assert info.value.code == 1
    assert cli.main(["print-config", "--set", "trainer.bogus=1"]) == 1
    assert cli.main(["print-config", "--config", str(tmp_path / "missing.yaml")]) == 1


def test_missing_inputs_exit_2(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    assert run(cfg, "train-critic", out=tmp_path / "empty") == 2
    assert run(cfg, "gen-data", out=tmp_path / "x") == 0
    # no critic checkpoint yet
    assert run(cfg, "train-policy", "--algorithm", "ppo", out=tmp_path / "x") == 2
    assert not (tmp_path / "x" / "policy" / "ppo.ckpt").exists()


def test_divergence_exit_3(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    out = tmp_path / "div"
    assert run(cfg, "gen-data", out=out) == 0
    assert cli.main(["train-critic", "--config", str(cfg), "--output-dir", str(out), "--quiet",
                     "--set", "critic_optimizer.lr=1e300", "--set", "critic_optimizer.max_grad_norm=0"]) == 3


# gen-data --------------------------------------------------------------------

def test_zero_count_gives_empty_dataset_with_header(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    assert cli.main(["gen-data", "--config", str(cfg), "--output-dir", str(tmp_path / "z"), "--quiet",
                     "--set", "data.n_policy_eval=0", "--set", "data.n_logged_test=0"]) == 0
    records, header = read_all(tmp_path / "z" / "data" / "policy_eval.jsonl")
    assert records == [] and header["count"] == 0 and header["split"] == "policy_eval"
    records, header = read_all(tmp_path / "z" / "data" / "logged_test.jsonl")
    assert records == [] and header["oracle"]["similarity_penalty"] == 0.15


def test_workers_do_not_change_data(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    assert run(cfg, "gen-data", out=tmp_path / "w1") == 0
    assert cli.main(["gen-data", "--config", str(cfg), "--output-dir", str(tmp_path / "w2"), "--quiet",
                     "--workers", "2"]) == 0
    for f in (tmp_path / "w1" / "data").iterdir():
        assert f.read_bytes() == (tmp_path / "w2" / "data" / f.name).read_bytes()


# full pipeline ---------------------------------------------------------------

def test_declared_record_counts(runs):
    _, a, _ = runs
    for split, n in (("policy_train", 64), ("policy_eval", 40), ("logged_test", 300)):
        _, header = read_all(a / "data" / f"{split}.jsonl")
        assert header["count"] == n
    _, header = read_all(a / "data" / "logged_train.jsonl")
    assert 0 < header["count"] <= 400


def test_every_artifact_byte_identical(runs):
    _, a, b = runs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and not p.name.startswith("provenance"))
    assert any(str(f).startswith("policy") for f in files)
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_provenance_written_per_command(runs):
    _, a, _ = runs
    doc = json.loads((a / "provenance-train-policy.json").read_text())
    assert doc["provenance"]["m"] == 16 and doc["provenance"]["k"] == 4
    assert doc["config"]["output_dir"] == str(a)


def test_ppo_exploration_without_bonus_reproduces_ppo(runs, tmp_path):
    cfg, a, _ = runs
    out = tmp_path / "c0"
    for sub in ("data", "critic"):
        (out / sub).mkdir(parents=True)
        for f in (a / sub).iterdir():
            (out / sub / f.name).write_bytes(f.read_bytes())
    assert cli.main(["train-policy", "--config", str(cfg), "--output-dir", str(out), "--quiet",
                     "--algorithm", "ppo-exploration", "--set", "trainer.c=0"]) == 0
    assert read_curve(out / "policy" / "ppo-exploration.curve.csv") == read_curve(a / "policy" / "ppo.curve.csv")
    assert read_curve(a / "policy" / "ppo-exploration.curve.csv") != read_curve(a / "policy" / "ppo.curve.csv")


def test_report_sections(runs):
    _, a, _ = runs
    doc = json.loads((a / "eval" / "report.json").read_text())
    models = [r["model"] for r in doc["critics"]]
    assert models == ["oracle", "pointwise", "ncand", "dnn", "dnn+fcn", "dnn+fcn+pin", "dnn+fcn+pin+bigru", "fsc"]
    assert [r["algorithm"] for r in doc["replacement"]] == ["reinforce", "reinforce-real", "ppo", "ppo-exploration"]
    assert len(doc["ips"]) == 4 and len(doc["entropy"]) == 5
    text = (a / "eval" / "report.txt").read_text()
    assert "replacement ratio" in text and "absent" not in text


def test_evaluate_json_and_table_agree(runs):
    _, a, _ = runs
    doc = json.loads((a / "eval" / "report-ppo-exploration.json").read_text())
    table = EvalReport.parse_table((a / "eval" / "report-ppo-exploration.txt").read_text())
    assert doc == table
    assert all(doc[k] is not None for k in doc)
    assert 0 <= doc["replacement_ratio"] <= 1


def test_attention_csv_written(runs):
    _, a, _ = runs
    mat = read_attention_csv(a / "eval" / "attention.csv")
    assert mat.shape == (4, 4)
    assert abs(mat.sum(0) - 1).max() < 1e-6


def test_partial_report_marks_policies_absent(runs, tmp_path):
    cfg, a, _ = runs
    out = tmp_path / "partial"
    for sub in ("data", "critic"):
        (out / sub).mkdir(parents=True)
        for f in (a / sub).iterdir():
            (out / sub / f.name).write_bytes(f.read_bytes())
    assert run(cfg, "report", out=out) == 0
    doc = json.loads((out / "eval" / "report.json").read_text())
    assert doc["replacement"] is None and doc["ips"] is None
    assert "policies: absent" in (out / "eval" / "report.txt").read_text()
