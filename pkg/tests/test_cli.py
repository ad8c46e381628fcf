import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from invcast import cli
from invcast import panel as pnl
from invcast.forecast import ForecastTensor, NaiveSeasonal

SMALL = ["--synth-n", "3", "--synth-t", "48", "--period", "6", "--lead-time", "2",
         "--horizon", "4", "--init-steps", "5", "--steps-per-update", "1", "--seed", "7"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _run(tmp_path, name, *extra):
    out = tmp_path / name
    code = cli.main(["run", *SMALL, "--out", str(out), *extra])
    return code, out


def test_run_mse_one_row_per_cell(tmp_path):
    code, out = _run(tmp_path, "mse", "--objectives", "mse", "--ch", "1,10", "--cs", "1",
                     "--cv", "0.001")
    assert code == 0
    rows = _rows(out / "metrics.csv")
    assert [(r["c_h"], r["c_s"]) for r in rows] == [("1.0", "1.0"), ("10.0", "1.0")]
    assert list(rows[0]) == ["model", "objective", "c_h", "c_s", "c_v", "C_h", "C_s", "C_v",
                             "TC", "RRMS", "MSE", "sMAPE"]
    for name in ("improvement.csv", "betas.csv", "avg_forecast.csv", "manifest.json",
                 "demand.csv"):
        assert (out / name).exists()


def test_full_grid_shape(tmp_path):
    code, out = _run(tmp_path, "grid", "--objectives", "tc", "--ch", "1,2,10", "--cs", "1,2,10",
                     "--cv", "1e-6,1e-5")
    assert code == 0
    rows = _rows(out / "metrics.csv")
    assert sum(r["objective"] == "tc" for r in rows) == 18
    assert len(_rows(out / "betas.csv")) == 18


def test_repeat_runs_are_byte_identical(tmp_path):
    args = ("--objectives", "mse,tc", "--ch", "1,10", "--cs", "1", "--cv", "1e-5")
    _, a = _run(tmp_path, "a", *args)
    _, b = _run(tmp_path, "b", *args)
    names = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert names == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_evaluate_reproduces_run_metrics(tmp_path, capsys):
    code, out = _run(tmp_path, "ev", "--objectives", "tc", "--ch", "2", "--cs", "5",
                     "--cv", "1e-4")
    assert code == 0
    run_row = _rows(out / "metrics.csv")[0]
    manifest = json.loads((out / "manifest.json").read_text())
    test_start = manifest["eval"]["test"][0]
    report = tmp_path / "eval.csv"
    (fpath,) = (out / "forecasts").glob("tc_*.csv")
    code = cli.main(["evaluate", "--forecasts", str(fpath),
                     "--demand", str(out / "demand.csv"), "--ch", "2", "--cs", "5",
                     "--cv", "1e-4", "--lead-time", "2", "--period", "6",
                     "--eval-start", str(test_start), "--out", str(report)])
    assert code == 0
    ev_row = _rows(report)[0]
    for k in ("C_h", "C_s", "C_v", "TC", "RRMS", "MSE", "sMAPE"):
        assert ev_row[k] == run_row[k], k


def _demand_file(tmp_path, values, name="demand.csv"):
    values = np.atleast_2d(values)
    panel = pnl.DemandPanel(values, np.ones(values.shape, bool), 1, 1, values.shape[1],
                            tuple(f"s{i}" for i in range(values.shape[0])))
    path = tmp_path / name
    pnl.emit_csv(panel, path, "long")
    return path, panel


def _evaluate(tmp_path, fpath, dpath, *extra):
    report = tmp_path / "report.csv"
    code = cli.main(["evaluate", "--forecasts", str(fpath), "--demand", str(dpath),
                     "--out", str(report), *extra])
    return code, (_rows(report)[0] if code == 0 else None)


def test_evaluate_naive_against_itself(tmp_path):
    rng = np.random.default_rng(0)
    d = rng.uniform(5, 50, size=(2, 30))
    dpath, panel = _demand_file(tmp_path, d)
    f = NaiveSeasonal(4).forecast_batch(d, np.arange(3, 30), 3)
    fpath = tmp_path / "f.csv"
    ForecastTensor(f, 3).to_csv(fpath, panel.series_ids)
    code, row = _evaluate(tmp_path, fpath, dpath, "--period", "4", "--lead-time", "3",
                          "--cv", "0.01")
    assert code == 0
    assert abs(float(row["RRMS"]) - math.sqrt(0.75)) <= 1e-9


def test_evaluate_perfect_forecasts(tmp_path):
    d = np.array([[4.0, 2.0, 7.0, 3.0, 5.0, 6.0]])
    dpath, panel = _demand_file(tmp_path, d)
    f = d[:, 1:, None]  # origins 0..4, each predicting the next value exactly
    fpath = tmp_path / "f.csv"
    ForecastTensor(f, 0).to_csv(fpath, panel.series_ids)
    code, row = _evaluate(tmp_path, fpath, dpath, "--period", "1", "--lead-time", "1",
                          "--cs", "3")
    assert code == 0
    assert float(row["C_h"]) == 0.0
    assert float(row["C_s"]) == pytest.approx(3 * 4.0 / 5)


def test_evaluate_zero_file(tmp_path):
    dpath, panel = _demand_file(tmp_path, np.zeros((2, 8)))
    fpath = tmp_path / "f.csv"
    ForecastTensor(np.zeros((2, 6, 2)), 1).to_csv(fpath, panel.series_ids)
    code, row = _evaluate(tmp_path, fpath, dpath, "--period", "2", "--lead-time", "2",
                          "--cv", "1")
    assert code == 0
    assert float(row["TC"]) == 0.0


def test_evaluate_shape_mismatch(tmp_path, capsys):
    dpath, panel = _demand_file(tmp_path, np.ones((1, 5)))
    fpath = tmp_path / "f.csv"
    ForecastTensor(np.ones((1, 8, 2)), 0).to_csv(fpath, panel.series_ids)
    code, _ = _evaluate(tmp_path, fpath, dpath, "--period", "1", "--lead-time", "2")
    assert code == 2
    assert "error" in capsys.readouterr().err

    ForecastTensor(np.ones((1, 3, 1)), 0).to_csv(fpath, panel.series_ids)
    code, _ = _evaluate(tmp_path, fpath, dpath, "--period", "1", "--lead-time", "2")
    assert code == 2


def test_invalid_spec_names_the_field(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"c_h": [], "out": str(tmp_path / "x")}))
    assert cli.main(["run", "--spec", str(spec)]) == 2
    assert "c_h" in capsys.readouterr().err
    spec.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["run", "--spec", str(spec)]) == 2
    assert "bogus" in capsys.readouterr().err
    assert cli.main(["run", "--data", str(tmp_path / "missing.csv"), "--out",
                     str(tmp_path / "y")]) == 2
    assert "data" in capsys.readouterr().err


def test_spec_file_with_flag_override(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"objectives": ["tc"], "c_h": [1], "c_s": [3], "c_v": [0.0],
                                "synth": {"n": 2, "t_len": 40, "base": 50, "amplitude": 10},
                                "period": 4, "lead_time": 2, "horizon": 3, "init_steps": 2,
                                "steps_per_update": 1}))
    out = tmp_path / "o"
    assert cli.main(["run", "--spec", str(spec), "--cs", "5", "--out", str(out)]) == 0
    rows = _rows(out / "metrics.csv")
    assert [r["c_s"] for r in rows] == ["5.0"]


def test_synth_ingest_report_commands(tmp_path, capsys):
    data = tmp_path / "syn.csv"
    assert cli.main(["synth", "--n", "2", "--t-len", "30", "--schema", "wide",
                     "--out", str(data)]) == 0
    canon = tmp_path / "canon.csv"
    assert cli.main(["ingest", str(data), "--schema", "wide", "--out", str(canon)]) == 0
    assert "series=2 T=30" in capsys.readouterr().out
    back = pnl.ingest_csv(canon, "long")
    assert back.values.tobytes() == pnl.ingest_csv(data, "wide").values.tobytes()

    code, out = _run(tmp_path, "r", "--objectives", "mse,tc", "--ch", "1,10", "--cs", "1",
                     "--cv", "0")
    assert code == 0
    rebuilt = tmp_path / "imp.csv"
    assert cli.main(["report", str(out / "metrics.csv"), "--out", str(rebuilt)]) == 0
    assert rebuilt.read_bytes() == (out / "improvement.csv").read_bytes()


def test_ingest_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("series_id,t,demand\na,0,x\n")
    assert cli.main(["ingest", str(bad)]) == 2
    assert "bad.csv:2" in capsys.readouterr().err


def test_global_mode_writes_checkpoints(tmp_path):
    code, out = _run(tmp_path, "g", "--objectives", "tc", "--ch", "1", "--cs", "2",
                     "--cv", "0", "--mode", "global")
    assert code == 0
    assert list((out / "models").glob("*.npz"))


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "invcast.cli", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    for cmd in ("ingest", "synth", "run", "evaluate", "report"):
        assert cmd in proc.stdout


def test_failed_cell_gives_nonzero_exit_and_keeps_rows(tmp_path, monkeypatch):
    from invcast import experiment

    real = experiment.train_objective

    def flaky(spec, panel, objective, costs, lr):
        if objective == "tc" and costs.c_h == 10.0:
            raise FloatingPointError("diverged")
        return real(spec, panel, objective, costs, lr)

    monkeypatch.setattr(experiment, "train_objective", flaky)
    code, out = _run(tmp_path, "f", "--objectives", "mse,tc", "--ch", "1,10", "--cs", "1",
                     "--cv", "0")
    assert code == 1
    rows = _rows(out / "metrics.csv")
    assert [(r["objective"], r["c_h"]) for r in rows] == [("mse", "1.0"), ("mse", "10.0"),
                                                          ("tc", "1.0")]
    assert json.loads((out / "manifest.json").read_text())["failed_cells"] == 1
