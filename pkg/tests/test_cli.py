import json
import shutil
import subprocess
import sys

import pytest

from neurotrack import cli
from neurotrack.errors import NumericError

SYNTH = ["--subjects", "3", "--duration", "200", "--channels", "4"]
TRAIN = ["--T", "2", "--epochs", "2", "--patience", "1", "--dtype", "float32"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "rec"), "--seed", "5", *SYNTH]) == 0
    assert cli.main(["preprocess", "--in", str(root / "rec"), "--out", str(root / "feat"), "--channels", "4"]) == 0
    assert cli.main(["train", "--features", str(root / "feat"), "--out", str(root / "sd"), *TRAIN]) == 0
    assert cli.main(["train", "--features", str(root / "feat"), "--out", str(root / "si"),
                     "--condition", "SI", "--test-subjects", "S02", *TRAIN]) == 0
    return root


def test_synth_outputs(pipeline):
    manifest = json.loads((pipeline / "rec" / "manifest.json").read_text())
    assert [r["key"] for r in manifest["recordings"]] == ["S00_story0", "S01_story0", "S02_story0"]
    assert manifest["config"]["duration"] == 200
    assert (pipeline / "rec" / "S01_story0.eeg.ntrk.json").exists()


def test_synth_zero_subjects(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path), "--subjects", "0"]) == 0
    assert json.loads((tmp_path / "manifest.json").read_text())["recordings"] == []


def test_synth_same_seed_same_bytes(tmp_path):
    for d in ("a", "b"):
        cli.main(["synth", "--out", str(tmp_path / d), "--subjects", "1", "--duration", "60",
                  "--channels", "2", "--seed", "9"])
    for name in ("S00_story0.eeg.ntrk", "S00_story0.stim.ntrk", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_preprocess_outputs(pipeline):
    names = {p.name for p in (pipeline / "feat").iterdir()}
    for key in ("envelope", "f0", "eeg_envelope", "eeg_f0"):
        assert f"S00_story0.{key}.ntrk" in names
    state = json.loads((pipeline / "feat" / "S00_story0.state.json").read_text())
    assert state["filters"]["f0"]["band"] == [75, 175]


def test_preprocess_is_idempotent(pipeline, capsys):
    before = {p.name: p.stat().st_mtime_ns for p in (pipeline / "feat").glob("*.ntrk")}
    assert cli.main(["preprocess", "--in", str(pipeline / "rec"), "--out", str(pipeline / "feat"), "--channels", "4"]) == 0
    assert "computed 0, skipped 3" in capsys.readouterr().out
    after = {p.name: p.stat().st_mtime_ns for p in (pipeline / "feat").glob("*.ntrk")}
    assert before == after


def test_preprocess_recomputes_on_config_change(pipeline, tmp_path, capsys):
    out = tmp_path / "feat"
    shutil.copytree(pipeline / "feat", out)
    cfg = tmp_path / "pp.json"
    cfg.write_text(json.dumps({"artifact_threshold": 6.0}))
    assert cli.main(["preprocess", "--in", str(pipeline / "rec"), "--out", str(out), "--config", str(cfg),
                     "--channels", "4"]) == 0
    assert "computed 3, skipped 0" in capsys.readouterr().out


def test_corrupt_input_exits_2(pipeline, tmp_path, capsys):
    rec = tmp_path / "rec"
    shutil.copytree(pipeline / "rec", rec)
    path = rec / "S01_story0.eeg.ntrk"
    data = bytearray(path.read_bytes())
    data[-3] ^= 0x55
    path.write_bytes(bytes(data))
    assert cli.main(["preprocess", "--in", str(rec), "--out", str(tmp_path / "feat"), "--channels", "4"]) == 2
    err = capsys.readouterr().err
    assert "S01_story0.eeg.ntrk" in err and "checksum mismatch" in err


def test_train_outputs(pipeline):
    sd = pipeline / "sd"
    assert sorted(p.name for p in (sd / "models").glob("*.ntrk")) == ["S00.ntrk", "S01.ntrk", "S02.ntrk"]
    header = (sd / "logs" / "S00.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_loss,val_acc"
    report = json.loads((sd / "report.json").read_text())
    assert len(report["rows"]) == 3
    assert report["meta"]["plan"]["condition"] == "SD"
    si = json.loads((pipeline / "si" / "manifest.json").read_text())
    assert si["plan"]["train_subjects"] == ["S00", "S01"] and si["plan"]["test_subjects"] == ["S02"]
    assert "S02_story0" in si["inputs"]


def test_timing_kept_out_of_logs(pipeline):
    assert "seconds" not in (pipeline / "sd" / "logs" / "S00.csv").read_text()
    assert "total_seconds" in json.loads((pipeline / "sd" / "timing.json").read_text())


def test_segment_index(pipeline, tmp_path):
    out = tmp_path / "index.json"
    assert cli.main(["segment", "--features", str(pipeline / "feat"), "--out", str(out), "--T", "2"]) == 0
    index = json.loads(out.read_text())
    assert set(index["recordings"]) == {"S00_story0", "S01_story0", "S02_story0"}
    assert set(index["recordings"]["S00_story0"]) == {"train", "val", "test"}


def test_evaluate_and_stats(pipeline, tmp_path, capsys):
    out = tmp_path / "eval"
    assert cli.main(["evaluate", "--features", str(pipeline / "feat"),
                     "--models", str(pipeline / "sd"), str(pipeline / "si"), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert {(r["model"], r["condition"]) for r in report["rows"]} == {("env", "SD"), ("env", "SI")}
    # Re-evaluation reproduces the accuracies written at training time.
    trained = json.loads((pipeline / "sd" / "report.json").read_text())["rows"]
    sd_rows = [r for r in report["rows"] if r["condition"] == "SD"]
    assert [r["accuracy"] for r in sd_rows] == [r["accuracy"] for r in trained]
    assert (out / "comparisons.csv").read_text().startswith("a,b,test")
    capsys.readouterr()
    assert cli.main(["stats", str(pipeline / "sd" / "report.json"), str(pipeline / "si" / "report.json"),
                     "--compare", "env/SD", "env/SI", "--out", str(tmp_path / "sig.txt")]) == 0
    assert "env/SD vs env/SI" in capsys.readouterr().out


def test_stats_bad_group(pipeline):
    assert cli.main(["stats", str(pipeline / "sd" / "report.json"), "--compare", "env", "env/SI"]) == 1


def test_inspect_container(pipeline, capsys):
    assert cli.main(["inspect", str(pipeline / "sd" / "models" / "S00.ntrk")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["checksum_ok"] and summary["n_parameters"] > 0


def test_inspect_filter(capsys):
    assert cli.main(["inspect", "--filter", "75", "175", "--fs", "1024"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["band"] == [75.0, 175.0] and d["stop_atten"] == 80.0 and d["order"] % 2 == 0


def test_si_overlap_is_usage_error(pipeline):
    assert cli.main(["train", "--features", str(pipeline / "feat"), "--out", "/tmp/unused",
                     "--condition", "SI", "--train-subjects", "S00,S01", "--test-subjects", "S01"]) == 1


def test_si_needs_test_subjects(pipeline):
    assert cli.main(["train", "--features", str(pipeline / "feat"), "--out", "/tmp/unused",
                     "--condition", "SI"]) == 1


@pytest.mark.parametrize("argv", [["bogus"], ["synth"], ["train", "--features", "x", "--out", "y", "--epochs", "z"]])
def test_usage_errors(argv):
    assert cli.main(argv) == 1


def test_unknown_config_field(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"durration": 100}))
    assert cli.main(["synth", "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 1


def test_missing_input_is_data_error(tmp_path):
    assert cli.main(["preprocess", "--in", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_numeric_failure_exits_3(pipeline, tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise NumericError("non-finite loss nan at epoch 0, batch 0")

    monkeypatch.setattr(cli, "run", boom)
    assert cli.main(["train", "--features", str(pipeline / "feat"), "--out", str(tmp_path), *TRAIN]) == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "neurotrack", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "neurotrack" in proc.stdout
