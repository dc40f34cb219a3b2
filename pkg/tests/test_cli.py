import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from penhmm.cli import main, parse_k
from penhmm.cv import CvResult
from penhmm.em import FitResult
from penhmm.sim import MetricTable


def _run(args, capsys):
    code = main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def panel_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--scenario", "a2", "--n", "40", "--T", "5", "--seed", "3", "--out", str(out)]) == 0
    return out / "data.csv"


def test_parse_k():
    assert parse_k("1..4") == [1, 2, 3, 4]
    assert parse_k("2,3") == [2, 3]
    assert parse_k("3") == [3]


def test_simulate_writes_files(panel_csv):
    frame = pd.read_csv(panel_csv)
    assert list(frame.columns) == ["id", "time", "y", "x1", "x2", "x3", "x4"]
    assert len(frame) == 200
    states = pd.read_csv(panel_csv.parent / "states.csv")
    assert set(states["state"]) <= {1, 2, 3}


def test_fit_then_decode(panel_csv, tmp_path, capsys):
    out = tmp_path / "fit"
    code, _, err = _run(
        ["fit", "--data", panel_csv, "--lag", "none", "--k", "2", "--lambda", "0.05", "--starts", "3",
         "--max-iter", "200", "--out", out],
        capsys,
    )
    assert code == 0, err
    doc = json.loads((out / "fit.json").read_text())
    assert doc["k"] == 2 and doc["lambda"] == 0.05
    back = FitResult.from_dict(doc["fit"])
    assert back.k == 2 and back.loglik == doc["fit"]["loglik"]
    coef = pd.read_csv(out / "coefficients.csv")
    assert list(coef["parameter"]) == ["alpha1", "alpha2", "x1", "x2", "x3", "x4"]
    assert coef["se"].notna().all()
    dec = pd.read_csv(out / "decoding.csv")
    assert len(dec) == 200 and set(dec["state"]) <= {1, 2}

    code, text, err = _run(["decode", "--data", panel_csv, "--lag", "none", "--fit", out / "fit.json"], capsys)
    assert code == 0, err
    again = pd.DataFrame(json.loads(text)["trajectories"])
    np.testing.assert_array_equal(again["state"], dec["state"])
    np.testing.assert_allclose(again["alpha_bar"], dec["alpha_bar"])


def test_fit_to_stdout_uses_config_file(panel_csv, tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"data": str(panel_csv), "k": [1], "starts": 1, "covariates": ["x1", "x2"], "lag": "none"}))
    code, text, err = _run(["fit", "--config", cfg, "--no-se"], capsys)
    assert code == 0, err
    doc = json.loads(text)
    assert doc["covariate_names"] == ["x1", "x2"] and doc["standard_errors"] is None


def test_cv(panel_csv, tmp_path, capsys):
    out = tmp_path / "cv"
    code, _, err = _run(
        ["cv", "--data", panel_csv, "--k", "1..2", "--lambda", "0,0.05", "--folds", "2", "--starts", "2",
         "--max-iter", "100", "--out", out],
        capsys,
    )
    assert code == 0, err
    doc = json.loads((out / "cv.json").read_text())
    assert CvResult.from_dict(doc["result"]).table == {
        (r["k"], r["lambda"]): r["cv_loglik"] for r in doc["result"]["table"]
    }
    assert {(r["k"], r["lambda"]) for r in doc["result"]["table"]} == {(1, 0.0), (2, 0.0), (2, 0.05)}
    table = pd.read_csv(out / "cv_table.csv")
    assert list(table["k"]) == [1, 2]


def test_bench(tmp_path, capsys):
    out = tmp_path / "bench"
    code, _, err = _run(
        ["bench", "--scenario", "a1", "--n", "20", "--T", "4", "--replicates", "1", "--starts", "1",
         "--max-iter", "30", "--lambda", "0.05", "--keep-rank-deficient", "--out", out],
        capsys,
    )
    assert code == 0, err
    rows = pd.read_csv(out / "metrics.csv")
    assert set(rows["lambda"]) == {0.0, 0.05}
    doc = json.loads((out / "bench.json").read_text())
    assert doc["metrics"]["n_excluded"] == {rows["scenario"][0]: 0}
    assert len(MetricTable.from_dict(doc["metrics"]).records) == 2


def test_bench_with_everything_excluded_still_writes_header(tmp_path, monkeypatch):
    import penhmm.cli as cli
    from penhmm.sim import MetricTable

    monkeypatch.setattr(cli, "run_study", lambda *a, **k: MetricTable())
    assert main(["bench", "--replicates", "1", "--out", str(tmp_path)]) == 0
    assert list(pd.read_csv(tmp_path / "metrics.csv").columns) == cli.METRIC_COLUMNS


@pytest.mark.parametrize(
    "flags, last, T", [([], "y_lag", 4), (["--lag", "zero"], "y_lag", 5), (["--lag", "none"], "x4", 5)]
)
def test_lag_policies(panel_csv, capsys, flags, last, T):
    code, text, err = _run(["fit", "--data", panel_csv, "--k", "1", "--starts", "1", "--no-se", *flags], capsys)
    assert code == 0, err
    doc = json.loads(text)
    assert doc["covariate_names"][-1] == last
    assert len(doc["decoding"]["states"][0]) == T


@pytest.mark.parametrize(
    "args",
    [
        ["fit", "--k", "2"],
        ["fit", "--data", "missing.csv"],
        ["fit", "--data", "{csv}", "--k", "1,2"],
        ["fit", "--data", "{csv}", "--starts", "0"],
        ["fit", "--config", "missing.json"],
        ["cv", "--data", "{csv}", "--folds", "500"],
        ["frobnicate"],
        ["fit", "--k", "x..y"],
    ],
)
def test_usage_errors_exit_2_with_json(args, panel_csv, capsys):
    code, _, err = _run([a.replace("{csv}", str(panel_csv)) for a in args], capsys)
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["exit_code"] == 2


def test_bad_data_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,time,y\n1,1,0\n1,2,3\n")
    code, _, err = _run(["fit", "--data", bad], capsys)
    assert code == 2
    assert "binary" in json.loads(err)["message"]


def test_numerical_failure_exits_3(panel_csv, capsys, monkeypatch):
    import penhmm.cli as cli

    def boom(cfg):
        raise np.linalg.LinAlgError("singular")

    monkeypatch.setitem(cli.COMMANDS, "fit", boom)
    code, _, err = _run(["fit", "--data", panel_csv], capsys)
    assert code == 3 and json.loads(err)["error"] == "numerical"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "penhmm", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "penhmm" in proc.stdout
