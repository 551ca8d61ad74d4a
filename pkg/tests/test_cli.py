import csv
import json

import pytest

from polycast import cli
from polycast.core import InvariantViolation


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_usage_errors(tmp_path, capsys):
    assert cli.main(["frobnicate", "--out", str(tmp_path)]) == 2
    assert cli.main(["run", "--out", str(tmp_path / "o"), "--bogus"]) == 2
    assert cli.main(["run", "--out", str(tmp_path / "o")]) == 2
    assert "--config is required" in capsys.readouterr().err
    assert cli.main(["synthworld", "--out", str(tmp_path / "o"), "--threads", "0"]) == 2


def test_config_error_exit_1(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"sites": ["A"], "weather": {}, "sensors": {}, "yield": {},
                               "backcast": {"window": -3}}))
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "backcast.window" in capsys.readouterr().err


def test_synthworld_and_force(tmp_path):
    out = tmp_path / "w"
    args = ["synthworld", "--out", str(out), "--season-days", "14", "--seed", "3"]
    assert cli.main(args) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "complete" and "config.json" in man["outputs"]
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["seed"] == 3
    before = (out / "weather" / "MO_2023.csv").read_bytes()
    assert cli.main(args) == 2
    assert cli.main(args + ["--force"]) == 0
    assert (out / "weather" / "MO_2023.csv").read_bytes() == before


def test_force_never_deletes_inputs(small_world, tmp_path):
    cfg = small_world / "config.json"
    assert cli.main(["preprocess", "--config", str(cfg), "--out", str(small_world), "--force"]) == 2
    assert cfg.exists()


def test_backcast_subcommand(small_world, tmp_path):
    out = tmp_path / "bc"
    assert cli.main(["backcast", "--config", str(small_world / "config.json"), "--out", str(out)]) == 0
    rows = _rows(out / "backcast" / "report.csv")
    assert len(rows) == 36
    assert {r["model"] for r in rows} == {"rf", "gbdt", "xgb"}
    man = json.loads((out / "manifest.json").read_text())
    assert man["stages"][-1] == "backcast" and man["status"] == "complete"
    assert not (out / "forecast").exists()


def test_forecast_slice(small_world, tmp_path):
    out = tmp_path / "fc"
    argv = ["forecast", "--config", str(small_world / "config.json"), "--out", str(out),
            "--feature-set", "yield", "--data-mode", "real",
            "--holdout", "Multispan:2023", "--holdout", "Seaton:2023"]
    assert cli.main(argv) == 0
    rows = _rows(out / "forecast" / "report.csv")
    assert len(rows) == 3
    assert {r["key"] for r in rows} == {"yield-only"}
    assert {r["data_mode"] for r in rows} == {"real-only"}


def test_bad_holdout(small_world, tmp_path):
    argv = ["forecast", "--config", str(small_world / "config.json"), "--out", str(tmp_path / "x"),
            "--holdout", "Seaton"]
    assert cli.main(argv) == 2


def test_data_error_leaves_incomplete_manifest(small_world, tmp_path, capsys):
    cfg = json.loads((small_world / "config.json").read_text())
    cfg["sensors"]["Seaton:2023"] = str(small_world / "sensors" / "missing.csv")
    for k in ("weather", "yield"):
        cfg[k] = {kk: str(small_world / v) for kk, v in cfg[k].items()}
    cfg["sensors"] = {k: str(small_world / v) if not v.startswith("/") else v for k, v in cfg["sensors"].items()}
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    out = tmp_path / "o"
    code = cli.main(["preprocess", "--config", str(p), "--out", str(out)])
    assert code == 1
    assert "[preprocess]" in capsys.readouterr().err
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "incomplete" and "error" in man


def test_invariant_exit_3(small_world, tmp_path, monkeypatch):
    import polycast.pipeline as pipeline

    def boom(ctx, until, **kw):
        pipeline.write_manifest(ctx, "incomplete", [until])
        raise InvariantViolation("broken")

    monkeypatch.setattr(pipeline, "run_stages", boom)
    argv = ["correlate", "--config", str(small_world / "config.json"), "--out", str(tmp_path / "o")]
    assert cli.main(argv) == 3


def test_evaluate_subcommand(tmp_path):
    pred = tmp_path / "p.csv"
    pred.write_text("timestamp,actual,rf,gbdt\n2023-05-01T00:00:00Z,1,2,1\n2023-05-01T01:00:00Z,2,4,2\n")
    out = tmp_path / "ev"
    assert cli.main(["evaluate", str(pred), "--out", str(out)]) == 0
    rows = {r["model"]: r for r in _rows(out / "metrics.csv")}
    assert float(rows["rf"]["rmse"]) == pytest.approx(2.5 ** 0.5)
    assert float(rows["rf"]["mae"]) == 1.5
    assert float(rows["gbdt"]["rmse"]) == 0.0
    assert json.loads((out / "manifest.json").read_text())["status"] == "complete"
    bad = tmp_path / "bad.csv"
    bad.write_text("timestamp,rf\nx,1\n")
    assert cli.main(["evaluate", str(bad), "--out", str(tmp_path / "ev2")]) == 1
