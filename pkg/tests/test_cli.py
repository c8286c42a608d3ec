import subprocess
import sys

import numpy as np
import pytest

from patchscope.cli import main
from patchscope.datasets import DatasetManifest, load_manifest
from patchscope.errors import ConfigError, MetricUndefinedError, MissingFileError
from patchscope.nets import load_model


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "syn"), "--n-real", "6", "--n-fake", "6", "--image-size", "40",
                 "--split-fractions", "0.5,0.25,0.25"]) == 0
    return root


FAST = ["--resize-to", "40", "--crop", "32", "--width-divisor", "16", "--max-epochs", "2", "--batch-size", "4"]


@pytest.fixture(scope="module")
def trained(data):
    run = data / "run1"
    assert main(["train", "--data", str(data / "syn" / "manifest.tsv"), "--out", str(run), *FAST]) == 0
    return run


def test_synth_writes_manifest_and_resolved_config(data):
    m = load_manifest(data / "syn" / "manifest.tsv")
    assert len(m) == 12
    assert "n_real=6" in (data / "syn" / "resolved.cfg").read_text()


def test_train_outputs(trained):
    assert {"model.bin", "trainlog.txt", "resolved.cfg"} <= {p.name for p in trained.iterdir()}
    assert "record=best" in (trained / "trainlog.txt").read_text()


def test_run_reproduces_from_resolved_config(data, trained):
    run2 = data / "run2"
    assert main(["train", "--config", str(trained / "resolved.cfg"), "--out", str(run2)]) == 0
    assert (run2 / "trainlog.txt").read_bytes() == (trained / "trainlog.txt").read_bytes()
    assert (run2 / "model.bin").read_bytes() == (trained / "model.bin").read_bytes()


def test_eval_and_sweep(data, trained, capsys):
    args = ["--model", str(trained / "model.bin"), "--data", str(data / "syn" / "manifest.tsv"), "--split", "test",
            "--resize-to", "40", "--crop", "32"]
    assert main(["eval", *args, "--out", str(data / "ev")]) == 0
    assert (data / "ev" / "report.txt").exists() and (data / "ev" / "report.csv").exists()
    assert main(["jpeg-sweep", *args, "--qualities", "100,90,80,70", "--out", str(data / "sw")]) == 0
    reports = sorted(p.name for p in (data / "sw").glob("report_q*.csv"))
    assert reports == ["report_q100.csv", "report_q70.csv", "report_q80.csv", "report_q90.csv"]
    assert (data / "sw" / "report_q100.csv").read_text() == (data / "ev" / "report.csv").read_text()


def test_score_heatmap_ensemble_bench(data, trained, capsys):
    model = str(trained / "model.bin")
    manifest = str(data / "syn" / "manifest.tsv")
    common = ["--resize-to", "40", "--crop", "32"]
    for split, out in (("val", "sv"), ("test", "st")):
        assert main(["score", "--model", model, "--data", manifest, "--split", split, "--out", str(data / out), *common]) == 0
    img = load_manifest(manifest).records[0]
    assert main(["heatmap", "--model", model, "--image", str(data / "syn" / img.path), "--top-k", "2",
                 "--out", str(data / "hm"), *common]) == 0
    assert {"heatmap.pgm", "heatmap.csv", "top1.ppm", "top2.ppm", "top_patches.csv"} <= {p.name for p in (data / "hm").iterdir()}
    st = str(data / "st" / "scores.csv")
    sv = str(data / "sv" / "scores.csv")
    assert main(["ensemble", "--scores-a", st, "--scores-b", st, "--val-scores-a", sv, "--val-scores-b", sv,
                 "--out", str(data / "en")]) == 0
    assert "alpha=" in (data / "en" / "resolved.cfg").read_text()
    assert main(["bench", "--arch", "tiny", "--input-size", "32", "--repeats", "2", "--out", str(data / "bn")]) == 0
    assert "params: 1281" in (data / "bn" / "bench.txt").read_text()


def test_exit_codes_are_distinct(data, tmp_path, capsys):
    manifest = str(data / "syn" / "manifest.tsv")
    assert main(["eval", "--model", str(tmp_path / "nope.bin"), "--data", manifest, "--out", str(tmp_path / "o")]) == MissingFileError.exit_code
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("error: MissingFileError: ")
    assert main(["train", "--data", manifest, "--out", str(tmp_path / "o"), "--set", "bogus=1"]) == ConfigError.exit_code
    assert "error: ConfigError:" in capsys.readouterr().err
    # a test split holding only fakes makes AP undefined
    m = load_manifest(manifest)
    only_fake = DatasetManifest([r for r in m.records if r.split != "test" or r.label == "fake"], m.root)
    only_fake.save(tmp_path / "fake_only.tsv")
    assert main(["train", "--data", str(tmp_path / "fake_only.tsv"), "--out", str(tmp_path / "r"), *FAST]) == 0
    assert main(["eval", "--model", str(tmp_path / "r" / "model.bin"), "--data", str(tmp_path / "fake_only.tsv"),
                 "--resize-to", "40", "--crop", "32", "--out", str(tmp_path / "e")]) == MetricUndefinedError.exit_code
    codes = {MissingFileError.exit_code, ConfigError.exit_code, MetricUndefinedError.exit_code}
    assert len(codes) == 3 and 0 not in codes


def test_unknown_key_in_config_file_rejected(data, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("lr=0.001\nlearning_rate=3\n")
    assert main(["train", "--config", str(cfg), "--data", "x", "--out", str(tmp_path / "o")]) == ConfigError.exit_code


def test_key_not_valid_for_command_rejected(tmp_path):
    assert main(["bench", "--out", str(tmp_path), "--set", "lr=0.1"]) == ConfigError.exit_code


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "patchscope.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth", "train", "distill", "score", "heatmap", "eval", "jpeg-sweep", "ensemble", "bench", "manifest"):
        assert cmd in out.stdout


def test_distill_command(data, trained):
    out = data / "di"
    assert main(["distill", "--teacher", str(trained / "model.bin"), "--data", str(data / "syn" / "manifest.tsv"),
                 "--out", str(out), "--resize-to", "40", "--crop", "32", "--max-epochs", "1", "--batch-size", "16",
                 "--save-distill-set", "true"]) == 0
    assert {"student.bin", "distill_log.txt", "distill_set.bin"} <= {p.name for p in out.iterdir()}
    assert main(["distill", "--distill-set", str(out / "distill_set.bin"), "--out", str(data / "di2"),
                 "--max-epochs", "1", "--batch-size", "16"]) == 0
    log1 = (out / "distill_log.txt").read_text()
    log2 = (data / "di2" / "distill_log.txt").read_text()
    assert log1 == log2
    assert np.isfinite(float(log1.splitlines()[-1].split("train_loss=")[1].split()[0]))


def test_distill_follows_teacher_representation(data, tmp_path):
    teacher = tmp_path / "t"
    assert main(["train", "--data", str(data / "syn" / "manifest.tsv"), "--out", str(teacher), *FAST,
                 "--max-epochs", "1", "--representation", "gradient"]) == 0
    assert main(["distill", "--teacher", str(teacher / "model.bin"), "--data", str(data / "syn" / "manifest.tsv"),
                 "--out", str(tmp_path / "s"), "--resize-to", "40", "--crop", "32", "--max-epochs", "1"]) == 0
    assert "representation=gradient" in (tmp_path / "s" / "resolved.cfg").read_text()
    assert load_model(tmp_path / "s" / "student.bin").config.representation == "gradient"
