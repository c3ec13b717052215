import csv
import filecmp
import json
import os
import shutil

import pytest

from dynodisco import cli
from dynodisco.cli import EXIT_COMPAT, EXIT_CONFIG, EXIT_OK, EXIT_TRAIN, main
from dynodisco.errors import TrainingError

SMALL = {
    "dataset": {"n_train_envs": 3, "train": {"horizon": 2.0, "n_traj": 3},
                "test": {"horizon": 5.0, "n_traj": 2}},
    "hyper": {"outer_iters": 3},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def run(*args):
    return main([str(a) for a in args])


def tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(tree_equal(os.path.join(a, d), os.path.join(b, d)) for d in cmp.common_dirs)


def pipeline(config, out, method="spreme"):
    for cmd in ("generate", "train", "evaluate"):
        assert run(cmd, "--config", config, "--system", "linear", "--seed", 0,
                   "--method", method, "--out", out) == EXIT_OK


def test_generate_is_byte_identical(tmp_path):
    # re-running into the same directory must reproduce every byte
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("generate", "--system", "linear", "--seed", 0, "--out", a) == EXIT_OK
    shutil.copytree(a, b)
    shutil.rmtree(a)
    assert run("generate", "--system", "linear", "--seed", 0, "--out", a) == EXIT_OK
    assert tree_equal(a, b)
    manifest = json.loads((a / "data" / "manifest.json").read_text())
    assert len(manifest["train_env_ids"]) == 9


def test_full_pipeline_is_deterministic(tmp_path, config):
    a, b = tmp_path / "a", tmp_path / "b"
    pipeline(config, a)
    shutil.copytree(a, b)
    shutil.rmtree(a)
    pipeline(config, a)
    assert tree_equal(a, b)
    rows = list(csv.DictReader(open(tmp_path / "a" / "report-spreme.csv")))
    assert [r["setting"] for r in rows] == ["in-domain", "out-of-domain"]
    assert all(r["precision"] and r["recall"] for r in rows)
    assert all(r["runtime_s"] == "" for r in rows)
    eff = json.loads((tmp_path / "a" / "effective-config.json").read_text())
    assert eff["hyper"]["outer_iters"] == 3 and "lam" in eff["hyper"]


def test_train_csv_has_one_row_per_iteration(tmp_path, config):
    pipeline(config, tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "train-spreme.csv")))
    assert [int(r["iter"]) for r in rows] == list(range(len(rows)))
    active = [int(r["active"]) for r in rows]
    assert all(a >= b for a, b in zip(active, active[1:]))


@pytest.mark.parametrize("method", ["sindy-intersection", "sindy-union"])
def test_baseline_methods_run(tmp_path, config, method):
    pipeline(config, tmp_path, method)
    rows = list(csv.DictReader(open(tmp_path / f"report-{method}.csv")))
    assert {r["method"] for r in rows} == {method}
    assert run("adapt", "--config", config, "--method", method, "--out", tmp_path) == EXIT_OK
    adapted = json.loads((tmp_path / f"adapted-{method}.json").read_text())
    assert list(adapted["coefficients"]) == ["3"]


def test_sindy_trains_per_environment_models(tmp_path, config):
    pipeline(config, tmp_path, "sindy")
    model = json.loads((tmp_path / "model-sindy.json").read_text())
    assert model["method"] == "sindy" and model["env_ids"] == [0, 1, 2]


def test_precision_columns_empty_without_truth(tmp_path, config):
    pipeline(config, tmp_path, "sindy-union")
    manifest_path = tmp_path / "data" / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    del manifest["truth"]
    manifest_path.write_text(json.dumps(manifest))
    assert run("evaluate", "--config", config, "--method", "sindy-union", "--out", tmp_path,
               "--mode", "out-of-domain") == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "report-sindy-union.csv")))
    assert len(rows) == 1 and rows[0]["precision"] == "" and rows[0]["recall"] == ""


def test_report_collects_rows(tmp_path, config, capsys):
    pipeline(config, tmp_path, "sindy-intersection")
    assert run("report", "--out", tmp_path) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert len(rows) == 2


@pytest.mark.parametrize("argv", [
    ["generate", "--system", "vanderpol"],
    ["train", "--method", "leads"],
    ["generate", "--seed", "-1"],
    ["frobnicate"],
])
def test_config_errors_exit_2(tmp_path, argv):
    assert run(*argv, "--out", tmp_path) == EXIT_CONFIG


def test_unknown_config_key_exits_2(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"hyper": {"learning_rate": 1}}))
    assert run("generate", "--config", path, "--out", tmp_path) == EXIT_CONFIG
    path.write_text("{not json")
    assert run("generate", "--config", path, "--out", tmp_path) == EXIT_CONFIG


def test_missing_dataset_exits_2(tmp_path):
    assert run("train", "--out", tmp_path / "nowhere") == EXIT_CONFIG


def test_bad_log_level_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("DYNODISCO_LOG", "loud")
    assert run("generate", "--out", tmp_path) == EXIT_CONFIG


def test_training_failure_exits_3(tmp_path, config, monkeypatch):
    assert run("generate", "--config", config, "--out", tmp_path) == EXIT_OK

    def boom(*a, **k):
        raise TrainingError("diverged")

    monkeypatch.setattr(cli, "fit_method", boom)
    assert run("train", "--config", config, "--out", tmp_path) == EXIT_TRAIN


def test_dimension_mismatch_exits_4(tmp_path, config):
    lv = tmp_path / "lv"
    small_lv = dict(SMALL, system="lotka-volterra")
    small_lv["dataset"] = {"n_train_envs": 3, "train": {"n_traj": 2}}
    cfg = tmp_path / "lv.json"
    cfg.write_text(json.dumps(small_lv))
    assert run("generate", "--config", cfg, "--out", lv, "--method", "sindy") == EXIT_OK
    assert run("train", "--config", cfg, "--out", lv, "--method", "sindy") == EXIT_OK
    lin = tmp_path / "lin"
    assert run("generate", "--config", config, "--out", lin) == EXIT_OK
    assert run("evaluate", "--config", config, "--out", lin, "--data", lin / "data",
               "--model", lv / "model-sindy.json") == EXIT_COMPAT


def test_library_mismatch_exits_4(tmp_path, config):
    pipeline(config, tmp_path, "sindy")
    other = json.loads(open(config).read())
    other["library"] = {"degree": 3}
    cfg = tmp_path / "deg3.json"
    cfg.write_text(json.dumps(other))
    assert run("train", "--config", cfg, "--method", "sindy", "--out", tmp_path) == EXIT_OK
    assert run("evaluate", "--config", cfg, "--method", "sindy", "--out", tmp_path) == EXIT_COMPAT


def test_sweep_with_empty_list_exits_2(tmp_path):
    assert run("sweep", "variance", "--values", "--out", tmp_path) == EXIT_CONFIG
    assert run("sweep", "horizon", "--values", "--out", tmp_path) == EXIT_CONFIG


def test_horizon_sweep_rows_and_columns(tmp_path, config):
    assert run("sweep", "horizon", "--config", config, "--values", 1, 4,
               "--out", tmp_path) == EXIT_OK
    with open(tmp_path / "sweep-horizon.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["eta"] for r in rows] == ["1", "4"]
    assert "train_seconds" in rows[0] and "rk4_steps" in rows[0]


def test_variance_sweep_row_count(tmp_path, config):
    assert run("sweep", "variance", "--config", config, "--values", 0.01, 0.1, 0.5,
               "--method", "sindy", "--out", tmp_path) == EXIT_OK
    with open(tmp_path / "sweep-variance.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 2
