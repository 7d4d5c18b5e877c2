from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from pseudogp import cli, runner


def write(path, obj):
    path.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    cfg = {"sim": {"design": "synthetic", "d": 2, "n_obs": 80, "n_exp": 40, "n_eval": 10, "n_fill": 16, "seed": 1}}
    assert cli.main(["simulate", "--config", write(root / "sim.json", cfg), "--output-dir", str(root / "data")]) == 0
    return root / "data"


@pytest.fixture(scope="module")
def fitted(simulated, tmp_path_factory):
    root = tmp_path_factory.mktemp("fit")
    cfg = {
        "experimental": str(simulated / "experimental.csv"),
        "observational": str(simulated / "observational.csv"),
        "model": "ours",
        "optimizer": {"method": "lbfgs", "max_iters": 30, "restarts": 1},
        "output_dir": str(root),
    }
    assert cli.main(["fit", "--config", write(root / "fit.json", cfg)]) == 0
    return root / "model.json"


def test_simulate_outputs_and_manifest(simulated):
    for name in ("observational.csv", "experimental.csv", "truth.json", "manifest.json"):
        assert (simulated / name).exists()
    manifest = json.loads((simulated / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["seed"] == 1
    assert len(manifest["config_sha256"]) == 64
    assert {"pseudogp", "numpy", "scipy", "python"} <= set(manifest["versions"])


def test_fit_and_predict(fitted, tmp_path):
    saved = json.loads(fitted.read_text())
    assert saved["obs_model"]["kind"] == "ridge" and len(saved["tasks"]) == 40
    cfg = {"model": str(fitted), "query": [[0.0, 0.0], [0.5, -0.5]], "output_dir": str(tmp_path)}
    assert cli.main(["predict", "--config", write(tmp_path / "p.json", cfg)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "predictions.csv")))
    assert len(rows) == 2
    for row in rows:
        assert float(row["low"]) <= float(row["mean_cate"]) <= float(row["high"])


def test_single_band(fitted, tmp_path):
    cfg = {"model": str(fitted), "query": [[0.0, 0.0]], "bound": {"delta": 0.05, "support_low": [-3, -3], "support_high": [3, 3]}}
    assert cli.main(["bound", "--config", write(tmp_path / "b.json", cfg), "--output-dir", str(tmp_path)]) == 0
    band = json.loads((tmp_path / "band.json").read_text())
    assert band["beta"] > 0 and len(band["per_point"]) == 1


def test_band_query_outside_support_is_runtime_failure(fitted, tmp_path, capsys):
    cfg = {"model": str(fitted), "query": [[5.0, 0.0]], "bound": {"support_low": [-3, -3], "support_high": [3, 3]}}
    assert cli.main(["bound", "--config", write(tmp_path / "b.json", cfg), "--output-dir", str(tmp_path)]) == 3
    assert "runtime failure" in capsys.readouterr().err


def test_experiment_writes_metrics(tmp_path):
    cfg = {
        "sim": {"design": "synthetic", "d": 1, "n_obs": 60, "n_exp": 30, "n_eval": 20, "n_fill": 16},
        "models": ["ours", "naive"],
        "optimizer": {"method": "lbfgs", "max_iters": 20, "restarts": 1},
        "replications": 1,
    }
    assert cli.main(["experiment", "--config", write(tmp_path / "e.json", cfg), "--output-dir", str(tmp_path)]) == 0
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == runner.METRIC_COLUMNS and len(rows) == 5


def test_bound_study_writes_table(tmp_path):
    cfg = {
        "sim": {"design": "synthetic", "d": 1, "n_obs": 60, "n_exp": 30, "n_eval": 20, "n_fill": 16},
        "models": ["ours"],
        "optimizer": {"method": "lbfgs", "max_iters": 20, "restarts": 1},
        "bound": {"delta": 0.05},
        "n_exp_list": [0, 30],
        "replications": 1,
    }
    assert cli.main(["bound", "--config", write(tmp_path / "g.json", cfg), "--output-dir", str(tmp_path)]) == 0
    with open(tmp_path / "bound_coverage.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == runner.BOUND_COLUMNS and len(rows) == 3


def test_hardness_writes_curve(tmp_path):
    cfg = {"n_list": [50], "trials": 200, "seed": 1}
    assert cli.main(["hardness", "--config", write(tmp_path / "h.json", cfg), "--output-dir", str(tmp_path)]) == 0
    curve = json.loads((tmp_path / "power_curve.json").read_text())
    assert curve[0]["n"] == 50 and curve[0]["trials"] == 200


def test_malformed_json_names_byte_offset(tmp_path, capsys):
    path = write(tmp_path / "bad.json", '{"sim": {"d": 2,, }}')
    assert cli.main(["simulate", "--config", path]) == 2
    assert "byte 16" in capsys.readouterr().err


def test_multibyte_offset_counts_bytes(tmp_path, capsys):
    path = write(tmp_path / "bad.json", '{"name": "é", x}')  # x is character 14, byte 15
    assert cli.main(["experiment", "--config", path]) == 2
    assert "byte 15" in capsys.readouterr().err


@pytest.mark.parametrize(
    "command, cfg, key",
    [
        ("experiment", {"replications": 0}, "replications"),
        ("experiment", {"sim": {"n_exp": -2}}, "sim.n_exp"),
        ("experiment", {"modles": ["ours"]}, "modles"),
        ("hardness", {"trials": 10}, "trials"),
        ("hardness", {"alpha": 2}, "alpha"),
        ("predict", {"query": [[0.0]]}, "model"),
    ],
)
def test_config_errors_exit_2_and_name_key(tmp_path, capsys, command, cfg, key):
    assert cli.main([command, "--config", write(tmp_path / "c.json", cfg), "--output-dir", str(tmp_path)]) == 2
    assert repr(key) in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert cli.main(["experiment", "--config", str(tmp_path / "nope.json")]) == 2
    assert "cannot read config" in capsys.readouterr().err


def test_non_object_config(tmp_path):
    assert cli.main(["experiment", "--config", write(tmp_path / "list.json", "[1, 2]")]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "pseudogp", "--version"], capture_output=True, text=True, check=True)
    assert out.stdout.startswith("pseudogp ")
