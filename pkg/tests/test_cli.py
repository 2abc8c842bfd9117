import json
import logging

from deepconvlstm.cli import main

SMALL = ["--set", "model.num_filters=4", "--set", "model.kernel_len=5", "--hidden", "8",
         "--set", "data.synthetic.duration_seconds=12", "--set", "data.synthetic.num_subjects=3",
         "--epochs", "1", "--batch-size", "32"]


def run(*argv):
    return main([*argv])


def test_train_smoke(tmp_path):
    assert run("train", "--out", str(tmp_path), *SMALL) == 0
    for name in ("checkpoint.npz", "trace.jsonl", "metrics.json"):
        assert (tmp_path / name).exists()
    lines = (tmp_path / "trace.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["record"] == "config"
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["config"]["train"]["lr"] == 1e-4
    assert metrics["holdout_subject"] == "s03"


def test_train_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--out", str(a), *SMALL) == 0
    assert run("train", "--out", str(b), *SMALL) == 0
    assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()


def test_bad_overlap_names_the_field(tmp_path, capsys):
    assert run("train", "--out", str(tmp_path), "--overlap", "1.0") == 2
    assert "overlap" in capsys.readouterr().err
    assert not (tmp_path / "metrics.json").exists()


def test_unknown_config_field(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  hiden_units: 3\n")
    assert run("train", "--config", str(cfg), "--out", str(tmp_path)) == 2
    assert "model.hiden_units" in capsys.readouterr().err


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  epochs: 7\n  batch_size: 16\n")
    out = tmp_path / "o"
    assert run("train", "--config", str(cfg), "--out", str(out), *SMALL) == 0
    snap = json.loads((out / "metrics.json").read_text())["config"]
    assert snap["train"]["epochs"] == 1  # flag beats file
    assert snap["train"]["batch_size"] == 32


def test_loso_grid_small(tmp_path):
    args = ["loso-grid", "--out", str(tmp_path), *SMALL, "--hidden", "128", "--lstm-layers", "1,2",
            "--seeds", "1,2"]
    assert run(*args) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert len(report["cells"]) == 12
    rows = (tmp_path / "cells.csv").read_text().splitlines()
    assert rows[0].startswith("# config_hash=")
    assert rows[1].split(",")[:4] == ["lstm_layers", "hidden_units", "seed", "validation_subject"]
    assert len(rows) == 2 + 12
    summary = (tmp_path / "summary.txt").read_text()
    h_rows = [l for l in summary.splitlines() if l.strip().startswith("128 ")]
    assert len(h_rows) == 1
    assert str(8 * 128 ** 2 + 4 * 128) in h_rows[0]
    assert len(list((tmp_path / "cells").glob("*.json"))) == 12
    # resume reuses every finished cell
    assert run(*args, "--resume") == 0
    assert json.loads((tmp_path / "report.json").read_text()) == report


def test_single_subject_csv_is_protocol_error(tmp_path):
    csv = tmp_path / "one.csv"
    assert run("synth", str(csv), "--set", "data.synthetic.num_subjects=1",
               "--set", "data.synthetic.duration_seconds=6") == 0
    assert run("loso-grid", "--csv", str(csv), "--out", str(tmp_path / "o")) == 5


def test_missing_csv_is_data_error(tmp_path):
    assert run("train", "--csv", str(tmp_path / "nope.csv"), "--out", str(tmp_path)) == 3


def test_analyze_table(capsys, tmp_path):
    assert run("analyze", "--s", "64", "--hidden", "128,256,512,1024", "--out", str(tmp_path)) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "s,h,p1,p2,delta,reduction"
    reds = [float(l.split(",")[-1]) for l in out[1:5]]
    assert round(reds[0] * 100, 1) == 57.1 and round(reds[-1] * 100, 1) == 65.3
    assert reds == sorted(reds)
    assert "mean reduction" in out[5]
    assert (tmp_path / "cost.csv").read_text().splitlines()[1] == out[0]


def test_analyze_empty_h_list():
    assert run("analyze", "--hidden", "") == 2


def test_bench_reports_provenance(tmp_path, capsys, caplog):
    with caplog.at_level(logging.WARNING):
        code = run("bench", "--out", str(tmp_path), "--hidden", "8,16", "--set", "bench.repetitions=1",
                   "--set", "bench.batch_size=4", "--set", "bench.batches_per_epoch=1")
    assert code == 0
    assert "repetitions=1" in caplog.text
    data = json.loads((tmp_path / "bench.json").read_text())
    assert len(data["config_hash"]) == 12 and "cpu_count" in data["machine"]
    assert [r["hidden_units"] for r in data["rows"]] == [8, 16]
    assert data["config_hash"] in capsys.readouterr().out


def test_env_var_sets_default_out(tmp_path, monkeypatch):
    monkeypatch.setenv("DEEPCONVLSTM_OUT", str(tmp_path / "envout"))
    assert run("analyze", "--hidden", "8") == 0
    assert run("train", *SMALL) == 0
    assert (tmp_path / "envout" / "metrics.json").exists()


def test_usage_error_exit_code():
    assert run("no-such-command") == 2
