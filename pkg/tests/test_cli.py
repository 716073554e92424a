import json
import subprocess
import sys

import pytest

from weightleak import cli
from weightleak.dataio import read_results
from weightleak.flsim import load_wiretap


def write_config(path, **sections):
    doc = {"schema_version": 1, "model": "tiny-mlp", "data": {"n": 20},
           "attack": {"objective": "dlm-plus", "iterations": 10}}
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key] = {**doc[key], **value}
        else:
            doc[key] = value
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def config(tmp_path):
    return write_config(tmp_path / "run.json")


def test_simulate_writes_one_update(config, tmp_path):
    out = tmp_path / "sim"
    assert cli.main(["simulate", "--config", str(config), "--out", str(out)]) == 0
    log, meta = load_wiretap(out / "wiretap.bin")
    assert len(log) == 1 and log[0].kind == "weights"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["updates"] == 1 and manifest["config_sha256"] == meta["config_sha256"]


def test_simulate_gradients_mode(tmp_path):
    cfg = write_config(tmp_path / "g.json", federation={"transmit": "gradients"})
    cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path)])
    log, _ = load_wiretap(tmp_path / "wiretap.bin")
    assert log[0].kind == "gradients"


def test_simulate_is_byte_identical(config, tmp_path):
    for d in ("a", "b"):
        cli.main(["simulate", "--config", str(config), "--out", str(tmp_path / d), "--seed", "4"])
    assert (tmp_path / "a" / "wiretap.bin").read_bytes() == (tmp_path / "b" / "wiretap.bin").read_bytes()


def test_attack_writes_results_and_images(config, tmp_path):
    cli.main(["simulate", "--config", str(config), "--out", str(tmp_path)])
    traces = []
    for _ in range(2):
        code = cli.main(["attack", "--config", str(config), "--wiretap", str(tmp_path / "wiretap.bin"),
                         "--out", str(tmp_path), "--seed", "3"])
        assert code == 0
        (rec,) = read_results(tmp_path / "results.jsonl")
        traces.append(rec["loss_trace"])
    assert traces[0] == traces[1] and len(traces[0]) == 10
    assert (tmp_path / "images" / "r0_c0_0.ppm").exists()


def test_attack_incompatible_payload_exits_2(config, tmp_path, capsys):
    cli.main(["simulate", "--config", str(config), "--out", str(tmp_path)])
    dlg = write_config(tmp_path / "dlg.json", attack={"objective": "dlg"})
    code = cli.main(["attack", "--config", str(dlg), "--wiretap", str(tmp_path / "wiretap.bin"), "--out", str(tmp_path)])
    assert code == 2
    assert "requires gradients mode" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 1, "attack": {"optimiser": "adam"}}))
    assert cli.main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "did you mean 'optimizer'" in capsys.readouterr().err
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2


def test_compare_and_report(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", trials=2, compare={"algorithms": ["dlg", "dlm-plus"]})
    out = tmp_path / "cmp"
    assert cli.main(["compare", "--config", str(cfg), "--out", str(out)]) == 0
    table = capsys.readouterr().out
    assert "| dlg |" in table and "| dlm-plus |" in table
    records = read_results(out / "results.jsonl")
    assert len(records) == 4 and {r["seed"] for r in records} == {0, 1}
    first = (out / "report.md").read_text()
    for _ in range(2):
        assert cli.main(["report", "--results", str(out / "results.jsonl"), "--out", str(out)]) == 0
        assert (out / "report.md").read_text() == first


def test_sweep_writes_csv(tmp_path):
    cfg = write_config(tmp_path / "s.json", trials=1, sweep={"kind": "tuning-k", "grid": [0.9, 1.1]})
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert rows[0].startswith("algorithm,grid") and len(rows) == 3


def test_jobs_from_environment(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "j.json", trials=2, compare={"algorithms": ["dlm-plus"]})
    cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "one"), "--jobs", "1"])
    monkeypatch.setenv("WEIGHTLEAK_JOBS", "2")
    cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / "two")])
    assert read_results(tmp_path / "one" / "results.jsonl") == read_results(tmp_path / "two" / "results.jsonl")


def test_report_on_empty_results_exits_2(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text("")
    assert cli.main(["report", "--results", str(p), "--out", str(tmp_path)]) == 2


def test_console_entry_point(config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "weightleak", "simulate", "--config", str(config),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "wiretap.bin").exists()
