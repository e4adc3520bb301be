import csv
import json
import os

import pytest

from coughfuse.audio_io import load_manifest
from coughfuse.cli import main


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--out", str(out), "--n-files", "30", "--imbalance", "2", "--max-duration", "3",
                 "--seed", "5"]) == 0
    return out


FAST = ["--set", "epochs=2"]


def test_synth_class_and_fold_counts(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--n-files", "100", "--imbalance", "9",
                 "--max-duration", "1.5"]) == 0
    entries = load_manifest(tmp_path / "manifest.csv")
    assert len(entries) == 100
    assert sum(e.label for e in entries) == 10
    per_fold = [sum(e.label for e in entries if e.fold == k) for k in range(5)]
    assert per_fold == [2, 2, 2, 2, 2]


def test_synth_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["synth", "--out", str(d), "--n-files", "12", "--imbalance", "3", "--seed", "9"]) == 0
    for name in sorted(os.listdir(a)):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_extract_writes_named_columns(corpus, tmp_path):
    assert main(["extract", "--manifest", str(corpus / "manifest.csv"), "--out", str(tmp_path),
                 "--what", "logmel_functionals,mfcc_functionals"]) == 0
    with open(tmp_path / "logmel_functionals.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows[0]) == 2 + 520 and rows[0][2] == "logmel0__mean"
    with open(tmp_path / "mfcc_functionals.csv") as fh:
        assert len(next(csv.reader(fh))) == 2 + 280
    assert len(rows) - 1 == 30  # every clip here is shorter than one segment


def _results(path):
    doc = json.loads((path / "results.json").read_text())
    doc.pop("meta")
    return doc


def test_crossval_writes_results_deterministically(corpus, tmp_path, capsys):
    args = ["crossval", "--manifest", str(corpus / "manifest.csv"), "--model", "handcrafted_dnn",
            "--seed", "3"] + FAST
    assert main(args + ["--out", str(tmp_path / "r1")]) == 0
    assert main(args + ["--out", str(tmp_path / "r2")]) == 0
    doc = _results(tmp_path / "r1")
    assert doc == _results(tmp_path / "r2")
    assert len(doc["results"]["handcrafted_dnn"]["folds"]) == 5
    assert doc["seed"] == 3 and doc["config"]["epochs"] == 2
    lines = (tmp_path / "r1" / "scores_handcrafted_dnn.csv").read_text().splitlines()
    assert lines[0] == "file,label,score" and len(lines) == 31
    assert "handcrafted_dnn: auc" in capsys.readouterr().out


def test_mfcc_feature_switch(corpus, tmp_path):
    assert main(["crossval", "--manifest", str(corpus / "manifest.csv"), "--model", "handcrafted_dnn",
                 "--features", "mfcc", "--out", str(tmp_path), "--set", "epochs=1"]) == 0
    assert _results(tmp_path)["config"]["features"] == "mfcc"


@pytest.fixture(scope="module")
def members(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("members")
    paths = []
    for kind in ("handcrafted_dnn", "spec_cnn_a", "spec_cnn_b"):
        assert main(["train", "--manifest", str(corpus / "manifest.csv"), "--model", kind,
                     "--out", str(out)] + FAST) == 0
        paths.append(out / f"{kind}.ckpt")
    return out, paths


def test_train_then_predict(corpus, members, capsys):
    _, paths = members
    wav = str(corpus / "cough_0000.wav")
    capsys.readouterr()
    assert main(["predict", "--checkpoint", str(paths[0]), "--input", wav]) == 0
    name, score = capsys.readouterr().out.strip().split(",")
    assert name == wav and 0.0 <= float(score) <= 1.0 and len(score.split(".")[1]) == 6


def test_fuse_and_reuse_members(corpus, members, tmp_path, capsys):
    out, paths = members
    assert main(["fuse", "--manifest", str(corpus / "manifest.csv"), "--strategy", "feature_attention",
                 "--members", ",".join(map(str, paths)), "--out", str(out)] + FAST) == 0
    fused = out / "feature_attention.ckpt"
    wav = str(corpus / "cough_0001.wav")
    capsys.readouterr()
    assert main(["predict", "--checkpoint", str(fused), "--input", wav]) == 0
    assert 0.0 <= float(capsys.readouterr().out.strip().split(",")[1]) <= 1.0

    assert main(["crossval", "--manifest", str(corpus / "manifest.csv"), "--fusion-checkpoint", str(fused),
                 "--out", str(tmp_path)] + FAST) == 0
    doc = _results(tmp_path)
    assert list(doc["results"]) == ["feature_attention"]
    from coughfuse.nnet import file_sha256
    assert [m["sha256"] for m in doc["members"]] == [file_sha256(p) for p in paths]


def test_stale_member_is_detected(corpus, members, tmp_path, capsys):
    out, paths = members
    stale = tmp_path / "stale"
    stale.mkdir()
    copies = []
    for p in paths:
        (stale / p.name).write_bytes(p.read_bytes())
        copies.append(stale / p.name)
    assert main(["fuse", "--manifest", str(corpus / "manifest.csv"), "--strategy", "decision_avg",
                 "--members", ",".join(map(str, copies)), "--out", str(stale)] + FAST) == 0
    # retrain one member in place: the fusion checkpoint now references a stale hash
    assert main(["train", "--manifest", str(corpus / "manifest.csv"), "--model", "spec_cnn_b",
                 "--out", str(stale), "--seed", "77", "--set", "epochs=1"]) == 0
    capsys.readouterr()
    code = main(["predict", "--checkpoint", str(stale / "decision_avg.ckpt"),
                 "--input", str(corpus / "cough_0000.wav")])
    assert code == 2
    assert "CheckpointError" in capsys.readouterr().err


def test_error_exit_codes(tmp_path, capsys):
    assert main(["crossval", "--manifest", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("coughfuse: error:")
    (tmp_path / "m.csv").write_text("path,label,fold\na.wav,maybe,0\n")
    assert main(["crossval", "--manifest", str(tmp_path / "m.csv"), "--out", str(tmp_path)]) == 2
    assert main(["crossval", "--manifest", str(tmp_path / "m.csv"), "--out", str(tmp_path),
                 "--set", "bogus=1"]) == 2
    assert "ConfigError" in capsys.readouterr().err


def test_config_file(corpus, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny run\nepochs = 1\nmixup = false\n")
    assert main(["crossval", "--manifest", str(corpus / "manifest.csv"), "--model", "handcrafted_dnn",
                 "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    doc = _results(tmp_path / "o")
    assert doc["config"]["epochs"] == 1 and doc["config"]["mixup"] is False
