import json
import os
import struct

import numpy as np

from .conftest import TINY


def tiny_sets():
    args = []
    for key, value in TINY.items():
        args += ["--set", f"{key}={value}"]
    return args


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images, labels = tmp_path / "images.idx", tmp_path / "labels.idx"
    write_idx(images, rng.integers(0, 256, size=(6, 28, 28)))
    write_idx(labels, [0, 1, 2, 0, 1, 2])
    return str(images), str(labels)


def test_convert_idx_prints_manifest(runner, tmp_path):
    images, labels = idx_pair(tmp_path)
    out = str(tmp_path / "archives")
    result = runner.invoke(args=["fada", "convert", "--domain", "mnist", "--images", images, "--labels", labels,
                                 "--out-dir", out])
    assert result.exit_code == 0, result.output
    manifest = json.loads(result.stdout)
    assert manifest["count"] == 6 and manifest["sample_shape"] == [1, 16, 16]
    assert manifest["class_counts"] == {"0": 2, "1": 2, "2": 2}
    assert os.path.basename(manifest["path"]) == "mnist_train.fada"


def test_convert_is_idempotent(runner, tmp_path):
    images, labels = idx_pair(tmp_path)
    out = str(tmp_path / "archives")
    args = ["fada", "convert", "--domain", "usps", "--split", "test", "--images", images, "--labels", labels,
            "--out-dir", out]
    runner.invoke(args=args)
    first = open(os.path.join(out, "usps_test.fada"), "rb").read()
    runner.invoke(args=args)
    assert open(os.path.join(out, "usps_test.fada"), "rb").read() == first

    again = runner.invoke(args=["fada", "convert", "--domain", "usps", "--split", "test",
                                "--archive", os.path.join(out, "usps_test.fada"), "--out-dir", str(tmp_path / "b")])
    assert again.exit_code == 0
    assert open(tmp_path / "b" / "usps_test.fada", "rb").read() == first


def test_convert_input_errors_exit_2(runner, tmp_path):
    missing = runner.invoke(args=["fada", "convert", "--domain", "mnist", "--images", str(tmp_path / "nope"),
                                  "--labels", str(tmp_path / "nope")])
    assert missing.exit_code == 2

    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x00\x00\x09\x99garbage")
    malformed = runner.invoke(args=["fada", "convert", "--domain", "mnist", "--images", str(bad),
                                    "--labels", str(bad)])
    assert malformed.exit_code == 2

    images, _ = idx_pair(tmp_path)
    lonely = runner.invoke(args=["fada", "convert", "--domain", "mnist", "--images", images])
    assert lonely.exit_code == 2


def test_run_stores_a_record(runner, app):
    result = runner.invoke(args=["fada", "run", "--task", "S->U", "--method", "LB", "--n", "1", *tiny_sets()])
    assert result.exit_code == 0, result.output
    payload = json.loads(result.stdout)
    assert 0.0 <= payload["accuracy"] <= 1.0
    assert app.config["RECORD_STORE"].ids() == ["S2U_LB_n1_seed0"]


def test_bad_overrides_exit_2(runner, monkeypatch):
    base = ["fada", "run", "--task", "S->U", "--method", "LB"]
    assert runner.invoke(args=base + ["--set", "bogus=1"]).exit_code == 2
    assert runner.invoke(args=base + ["--set", "seed=4"]).exit_code == 2
    assert runner.invoke(args=base + ["--set", "gamma"]).exit_code == 2
    assert runner.invoke(args=["fada", "run", "--task", "M->X", "--method", "LB"]).exit_code == 2
    monkeypatch.setenv("FADA_GAMMA", "lots")
    assert runner.invoke(args=base).exit_code == 2


def test_config_file_is_layered_under_set(runner, app, tmp_path):
    cfg = tmp_path / "fada.env"
    cfg.write_text("FADA_GAMMA=0.2\nLR_ADV=0.001\n")
    with app.app_context():
        from app.cli import resolve_overrides
        merged = resolve_overrides(str(cfg), ["gamma=0.7"])
    assert merged == {"gamma": "0.7", "lr_adv": "0.001"}


def test_report_without_records_exits_1(runner):
    result = runner.invoke(args=["fada", "report"])
    assert result.exit_code == 1


def test_sweep_then_report(runner, app):
    result = runner.invoke(args=["fada", "sweep", "--task", "S->U", "--method", "LB", "--n", "1-2", "--reps", "1",
                                 *tiny_sets()])
    assert result.exit_code == 0, result.output
    assert json.loads(result.stdout)["records"] == 2

    report = runner.invoke(args=["fada", "report"])
    assert report.exit_code == 0, report.output
    csv_path = os.path.join(app.config["OUT_DIR"], "report.csv")
    lines = open(csv_path).read().splitlines()
    assert lines[0] == "task,method,n,mean,std,count"
    assert len(lines) == 3
    assert os.path.exists(os.path.join(app.config["OUT_DIR"], "report_S2U.svg"))


def test_sweep_rejects_bad_n(runner):
    result = runner.invoke(args=["fada", "sweep", "--task", "S->U", "--method", "LB", "--n", "a-b"])
    assert result.exit_code == 2


def test_run_dumps_fada_pairs(runner, tmp_path):
    dump = tmp_path / "pairs.txt"
    result = runner.invoke(args=["fada", "run", "--task", "S->U", "--method", "FADA", "--n", "1",
                                 "--dump-pairs", str(dump), *tiny_sets()])
    assert result.exit_code == 0, result.output
    groups = [line.split()[0] for line in dump.read_text().splitlines()]
    assert sorted(set(groups)) == ["1", "2", "3", "4"]
    # |G2| = 10 classes x 12 source x 1 target pick; the other groups match it
    assert groups.count("2") == 120

    lb = runner.invoke(args=["fada", "run", "--task", "S->U", "--method", "LB", "--dump-pairs", str(dump)])
    assert lb.exit_code == 2


def test_export_raw_embeddings_without_a_run(runner, app):
    result = runner.invoke(args=["fada", "export-embeddings", "--task", "S->U", "--raw"])
    assert result.exit_code == 0, result.output
    paths = json.loads(result.stdout)
    assert paths["csv"].endswith("embeddings_S2U_raw_seed0.csv")
    assert os.path.exists(paths["svg"])

    missing = runner.invoke(args=["fada", "export-embeddings", "--task", "S->U"])
    assert missing.exit_code == 2
