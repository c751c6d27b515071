from __future__ import annotations

import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from hdqr.cli import SCHEMA, main, parse_grid, resolve_seed
from hdqr.core import Dataset
from hdqr.mcsim import write_dataset_csv


@pytest.fixture
def data_csv(tmp_path):
    rng = np.random.default_rng(21)
    n = 120
    z = rng.standard_normal((n, 8))
    x = np.column_stack([np.ones(n), z])
    d = z[:, 0] + rng.standard_normal(n)
    y = 0.5 * d + z[:, 1] + rng.standard_normal(n)
    data = Dataset(y=y, d=d, x=x, column_names=["const"] + [f"z{j}" for j in range(1, 9)])
    path = tmp_path / "data.csv"
    write_dataset_csv(data, path, y="wage", d="treat")
    return path


def test_infer_writes_report(data_csv, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["infer", "--data", str(data_csv), "--y", "wage", "--d", "treat",
                 "--method", "optiv", "--out", str(out), "--seed", "4"])
    assert code == 0
    doc = json.load(open(out / "report.json"))
    assert doc["schema"] == SCHEMA and doc["method"] == "optiv" and doc["seed"] == 4
    assert doc["resolved"]["density"] == "homoscedastic"
    assert doc["pivotal_critical"] > 1.5
    assert "const" in doc["support_names"]["final"]
    assert "timings" not in doc
    assert capsys.readouterr().out.startswith("method        optiv")
    assert (out / "summary.txt").exists()


def test_infer_is_byte_identical(data_csv, tmp_path):
    for name in ("a", "b"):
        assert main(["infer", "--data", str(data_csv), "--y", "wage", "--d", "treat",
                     "--density", "estimate", "--quiet", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_infer_config_file_and_precedence(data_csv, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"y": "wage", "d": "treat", "method": "naive", "xi": 0.1}))
    out = tmp_path / "run"
    assert main(["infer", "--data", str(data_csv), "--config", str(cfg), "--method", "double",
                 "--quiet", "--out", str(out)]) == 0
    doc = json.load(open(out / "report.json"))
    assert doc["method"] == "double" and doc["xi"] == 0.1


def test_infer_validation_errors(data_csv, tmp_path, capsys):
    assert main(["infer", "--data", str(data_csv), "--y", "wage", "--d", "nope",
                 "--out", str(tmp_path)]) == 2
    assert "nope" in capsys.readouterr().err
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lambda": 3}))
    assert main(["infer", "--data", str(data_csv), "--y", "wage", "--d", "treat",
                 "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert main(["infer", "--data", str(data_csv), "--y", "wage", "--d", "treat",
                 "--schema", "hdqr/9", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("wage,treat,z1\n1,2,3\n1,x,3\n")
    assert main(["infer", "--data", str(bad), "--y", "wage", "--d", "treat",
                 "--out", str(tmp_path)]) == 2


def test_infer_numeric_failure_exit(tmp_path):
    rng = np.random.default_rng(0)
    n = 40
    data = Dataset(y=rng.standard_normal(n), d=np.zeros(n),
                   x=np.column_stack([np.ones(n), rng.standard_normal(n)]))
    path = tmp_path / "zero.csv"
    write_dataset_csv(data, path)
    assert main(["infer", "--data", str(path), "--y", "y", "--d", "d", "--quiet",
                 "--out", str(tmp_path)]) == 3


def test_seed_resolution(monkeypatch):
    monkeypatch.delenv("HDQR_SEED", raising=False)
    assert resolve_seed(None) == 0
    monkeypatch.setenv("HDQR_SEED", "17")
    assert resolve_seed(None) == 17
    assert resolve_seed(5) == 5


def test_parse_grid():
    assert len(parse_grid("paper")) == 100
    assert parse_grid("0.1,0.5") == [(0.1, 0.1), (0.1, 0.5), (0.5, 0.1), (0.5, 0.5)]
    assert parse_grid("0.5:0.2") == [(0.5, 0.2)]


def test_density_command(data_csv, tmp_path, capsys):
    out = tmp_path / "dens"
    assert main(["density", "--data", str(data_csv), "--y", "wage", "--d", "treat",
                 "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    h = min(120 ** (-1 / 6), 0.125)
    assert f"{h:.10g}" in printed
    rows = list(csv.DictReader(open(out / "fhat.csv")))
    assert len(rows) == 120 and all(float(r["fhat"]) > 0 for r in rows)
    summary = json.load(open(out / "density_summary.json"))
    assert summary["h"] == pytest.approx(h) and summary["h_rule"] == "auto"
    assert main(["density", "--data", str(data_csv), "--y", "wage", "--d", "treat",
                 "--order", "2", "--h", "0.6", "--out", str(out)]) == 2


def test_mc_command(tmp_path):
    args = ["mc", "--grid", "0.5:0.5,0.2:0.8", "--reps", "1", "--n", "60", "--p", "15", "--seed", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--jobs", "2", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "grid.csv").read_bytes()
    assert a == (tmp_path / "b" / "grid.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a" / "grid.csv")))
    assert len(rows) == 8
    for r in rows:
        assert float(r["rejection"]) in (0.0, 1.0) or math.isnan(float(r["rejection"]))
    assert (tmp_path / "a" / "surface_double_wald.dat").exists()
    assert main(["mc", "--grid", "0.5:", "--out", str(tmp_path)]) == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "hdqr", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "infer" in res.stdout
