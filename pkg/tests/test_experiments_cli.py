import json
import os

import numpy as np
import pytest

from dtrec.cli import main
from dtrec.experiments import (
    ExperimentConfig,
    config_from_dict,
    load_config,
    load_sweep,
    method_label,
    parse_value,
    pop_scores,
    run_pop_baseline,
    run_sweep,
    with_overrides,
)
from dtrec.data import leave_last_out_split, make_log

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")

SMALL = """
n_runs = 1
outdir = "runs"
method = "DT"

[gda]
lam = 0.1
step_ratio = [1, 2, 2]
max_epochs = 2
batch_size = 2048

[gda.penalty]
n_interpolates = 64
"""


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def _run(capsys, argv):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("name", ["desk_scale", "lambda_sweep", "step_ratio_sweep", "method_comparison"])
def test_shipped_configs_load(name):
    path = os.path.join(CONFIG_DIR, f"{name}.toml")
    cfg = load_config(path)
    assert isinstance(cfg, ExperimentConfig)
    if "sweep" in name:
        assert load_sweep(path)


def test_overrides_and_values():
    cfg = with_overrides(ExperimentConfig(), {"gda.lam": 0.3, "gda.reco.K": 5, "method": "MCF"})
    assert cfg.gda.lam == 0.3 and cfg.gda.reco.K == 5 and cfg.method == "MCF"
    assert parse_value("0.5") == 0.5 and parse_value("[1, 2]") == [1, 2] and parse_value("toy") == "toy"
    with pytest.raises(ValueError, match="unknown"):
        config_from_dict({"gda": {"lamda": 1}})
    with pytest.raises(ValueError):
        with_overrides(ExperimentConfig(), {"method": "SVD"})


def test_method_labels():
    assert method_label(ExperimentConfig()) == "DT-MCF"
    assert method_label(ExperimentConfig(kinds={"f": "mcf", "w": "ncf", "g": "ncf"})) == "DT-(M/N/N)"
    assert method_label(ExperimentConfig(method="Pop")) == "Pop"


def test_pop_baseline_ranks_by_count():
    log = make_log(["a", "a", "a", "b", "b", "b", "c", "c", "c"], ["x", "y", "z", "x", "y", "w", "x", "z", "w"])
    split = leave_last_out_split(log)
    S = pop_scores(split)
    assert np.all(S == S[0]) and S[0, split.train.item_index["x"]] == 3
    rep = run_pop_baseline(split, __import__("dtrec.metrics", fromlist=["EvalConfig"]).EvalConfig(K=1, mode="full_rank"))
    assert 0 <= rep.hit_at_k <= 1


def test_sweep_needs_values():
    with pytest.raises(ValueError, match="nothing to sweep"):
        run_sweep(ExperimentConfig(), {})
    with pytest.raises(ValueError, match="nothing to sweep"):
        run_sweep(ExperimentConfig(), {"gda.lam": []})


def test_cli_parse_error_is_json(capsys):
    code, _, err = _run(capsys, ["train", "--bogus"])
    assert code == 2
    e = json.loads(err.strip().splitlines()[-1])
    assert e["error"] == "CliError"


def test_cli_bad_set(capsys):
    code, _, err = _run(capsys, ["train", "--set", "gda.lam"])
    assert code == 2 and json.loads(err)["command"] == "train"


def test_cli_missing_data(capsys, tmp_path):
    code, _, err = _run(capsys, ["ingest", "--input", str(tmp_path / "nope.tsv")])
    assert code == 1 and json.loads(err)["error"] == "DataError"


def test_cli_ingest(capsys, tmp_path):
    out = tmp_path / "norm.tsv"
    code, stdout, _ = _run(capsys, ["ingest", "--data", "toy", "--output", str(out)])
    s = json.loads(stdout)
    assert code == 0 and s["n_users"] == 200 and out.exists()


def test_cli_simulate_writes_outputs(capsys, tmp_path, small_config):
    d = tmp_path / "sim"
    code, stdout, _ = _run(capsys, ["simulate", "--config", str(small_config), "--output-dir", str(d)])
    assert code == 0
    assert {"clicks.tsv", "ground_truth.tsv", "ground_truth.tsv.json", "simulate.log.jsonl", "report.json"} <= set(os.listdir(d))
    rep = json.loads(stdout)
    assert abs(rep["click_ratio"] - rep["source_click_ratio"]) / rep["source_click_ratio"] <= 0.01


def test_cli_train_evaluate_weights(capsys, tmp_path, small_config):
    out = tmp_path / "runs"
    code, stdout, err = _run(capsys, ["train", "--config", str(small_config), "--outdir", str(out), "--topk", "5"])
    assert code == 0, err
    res = json.loads(stdout)
    assert res["label"] == "DT-MCF" and "Rel@5" in err
    run_dir = out / "DT-MCF" / "0"
    assert {"report.json", "train.log.jsonl", "checkpoint.bin", "weights.tsv"} <= set(os.listdir(run_dir))
    ck = str(run_dir / "checkpoint.bin")
    code, stdout, _ = _run(capsys, ["evaluate", "--config", str(small_config), "--checkpoint", ck, "--topk", "5"])
    assert code == 0
    assert json.loads(stdout)["rel_at_k"] == pytest.approx(res["summary"]["rel_at_k"]["mean"], abs=1e-12)
    code, stdout, _ = _run(capsys, ["weights", "--config", str(small_config), "--checkpoint", ck, "--output", str(tmp_path / "w.tsv")])
    assert code == 0 and json.loads(stdout)["rows"] > 0
    code, _, err = _run(capsys, ["evaluate", "--config", str(small_config), "--checkpoint", ck, "--model", "h"])
    assert code == 2 and "no model" in err


def test_cli_sweep_failed_cell_recorded(capsys, tmp_path, small_config):
    code, stdout, _ = _run(capsys, ["sweep", "--config", str(small_config), "--outdir", str(tmp_path),
                                    "--method", "Pop", "--sweep", "eval.n_negatives=50,100000"])
    rows = json.loads(stdout)
    assert code == 0 and [r["status"] for r in rows] == ["ok", "failed"]
    assert (tmp_path / "sweep.json").exists()


def test_cli_bandit_check(capsys):
    code, stdout, _ = _run(capsys, ["bandit-check", "--lambdas", "0,1,10", "--samples", "300"])
    out = json.loads(stdout)
    assert code == 0 and set(out["consistency"]) == {"2x2", "3x3"}
    assert out["consistency"]["2x2"]["gap"][-1] < 0.05
