import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from lgnn import cli, graphmodel


def run(*argv):
    return cli.main([str(a) for a in argv])


def n_records(path):
    # first line is the dataset header
    return len(path.read_text().splitlines()) - 1


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def chain4_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert run("generate", "--system", "chain-4", "--points", 40, "--trajectories", 2,
               "--dt", 1e-4, "--seed", 3, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def chain4_checkpoint(chain4_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--dataset", chain4_data / "dataset.jsonl", "--max-epochs", 0, "--out", out) == 0
    return out / "checkpoint.json"


def test_help_lists_subcommands():
    res = subprocess.run([sys.executable, "-m", "lgnn.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in ("generate", "train", "eval", "rollout", "massmatrix"):
        assert name in res.stdout


def test_generate_record_count_and_determinism(tmp_path, capsys):
    for name in ("a", "b"):
        assert run("generate", "--system", "chain-2", "--points", 10, "--trajectories", 1,
                   "--seed", 7, "--out", tmp_path / name) == 0
    assert "wrote 10 records" in capsys.readouterr().out
    assert n_records(tmp_path / "a" / "dataset.jsonl") == 10
    for f in ("dataset.jsonl", "topology.json"):
        assert digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f)


@pytest.mark.slow
def test_generate_default_dataset_size(tmp_path):
    assert run("generate", "--system", "chain-4", "--seed", 7, "--out", tmp_path) == 0
    assert n_records(tmp_path / "dataset.jsonl") == 10000


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"points": 20, "trajectories": 2, "system": "chain-2", "seed": 5}))
    assert run("generate", "--config", cfg, "--points", 6, "--out", tmp_path / "o") == 0
    echo = json.loads((tmp_path / "o" / "run_config.json").read_text())
    assert echo["command"] == "generate"
    assert (echo["points"], echo["trajectories"], echo["seed"]) == (6, 2, 5)
    assert n_records(tmp_path / "o" / "dataset.jsonl") == 6


def test_train_zero_epochs_writes_initial_checkpoint(chain4_checkpoint):
    out = chain4_checkpoint.parent
    echo = json.loads((out / "run_config.json").read_text())
    assert (echo["embedding_dim"], echo["hidden"], echo["batch_size"], echo["lr"]) == (5, 10, 10, 1e-3)
    model = graphmodel.load_checkpoint(chain4_checkpoint)
    fresh = graphmodel.LgnnModel.init(seed=0)
    for net in ("potential", "kinetic"):
        for k, v in fresh.params[net].items():
            np.testing.assert_array_equal(model.params[net][k], v)
    report = json.loads((out / "report.json").read_text())
    assert report["train_loss"] == [] and report["checkpoint"] == str(chain4_checkpoint)
    assert (out / "loss.csv").read_text().splitlines() == ["epoch,train_loss,val_loss"]


def test_clnn_refuses_other_sizes(chain4_data, tmp_path, capsys):
    assert run("train", "--dataset", chain4_data / "dataset.jsonl", "--model", "clnn",
               "--max-epochs", 0, "--out", tmp_path) == 0
    code = run("eval", "--checkpoint", tmp_path / "checkpoint.json", "--systems", "chain-8",
               "--horizon", 0.01, "--seeds", 1, "--out", tmp_path / "e")
    assert code != 0
    assert "not inductive" in capsys.readouterr().err


def test_eval_three_systems(chain4_checkpoint, tmp_path):
    assert run("eval", "--checkpoint", chain4_checkpoint, "--systems", "chain-4", "chain-8", "chain-16",
               "--horizon", 0.01, "--seeds", 2, "--gt-dt", 1e-4, "--out", tmp_path) == 0
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert [r["system"] for r in rows] == ["chain-4", "chain-8", "chain-16"]
    metrics = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert len(metrics) == 3 * 2 * 11


def test_eval_fixed_structure_single_run(chain4_checkpoint, tmp_path):
    assert run("eval", "--checkpoint", chain4_checkpoint, "--systems", "T1", "--horizon", 0.1,
               "--seeds", 5, "--gt-dt", 1e-4, "--out", tmp_path) == 0
    metrics = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert {r["seed"] for r in metrics} == {"0"}
    # 100 steps at dt 1e-3 plus the initial state
    assert len(metrics) == 101


def test_rollout_writes_both_trajectories(tmp_path):
    assert run("rollout", "--system", "chain-2", "--horizon", 0.01, "--gt-dt", 1e-4, "--out", tmp_path) == 0
    pred = (tmp_path / "predicted.jsonl").read_text().splitlines()
    truth = (tmp_path / "truth.jsonl").read_text().splitlines()
    assert len(pred) == len(truth) == 11
    assert json.loads(pred[-1])["t"] == pytest.approx(0.01)


def test_massmatrix_analytic_chain16_is_penta_diagonal(tmp_path):
    assert run("massmatrix", "--out", tmp_path) == 0
    mask = np.loadtxt(tmp_path / "mask.csv", delimiter=",").astype(bool)
    band = {int(k): v for k, v in json.loads((tmp_path / "band.json").read_text())["band_max"].items()}
    assert mask.shape == (32, 32)
    assert all(v == 0.0 for d, v in band.items() if d > 1) and band[1] > 0
    # in node ordering each row touches at most the node, its two neighbours (x and y each)
    offsets = np.abs(np.subtract.outer(np.arange(32), np.arange(32)))
    assert not mask[offsets > 3].any()
    np.testing.assert_array_equal(np.diag(mask), True)


def test_massmatrix_single_link_with_state(tmp_path):
    state = tmp_path / "s.json"
    state.write_text(json.dumps({"q": [0.0, 0.0, 0.0, -1.0], "qdot": [0.0, 0.0, 0.5, 0.0]}))
    assert run("massmatrix", "--system", "chain-1", "--state", state, "--out", tmp_path) == 0
    M = np.loadtxt(tmp_path / "mass_matrix.csv", delimiter=",")
    assert M.shape == (2, 2)
    np.testing.assert_array_equal(M, np.diag(np.diag(M)))


def test_unknown_system_exits_nonzero(tmp_path, capsys):
    assert run("generate", "--system", "chain-zero", "--out", tmp_path) == 1
    assert "error" in capsys.readouterr().err
