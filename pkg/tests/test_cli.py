import csv
import json
from pathlib import Path

import numpy as np
import pytest

from talign import cli
from talign import dataset as ds
from talign import geometry as geo

ROOT = Path(__file__).resolve().parents[1]

TINY_RUN = {
    "epochs_stage1": 1,
    "epochs_stage2": 1,
    "model": {"encoder_channels": [8, 16, 32], "decoder_channels": [16, 8, 16], "estimator_hidden": [32], "time_dim": 16},
}


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(root / "data"), "--count", "16", "--seed", "2"]) == 0
    (root / "run.json").write_text(json.dumps(TINY_RUN))
    assert cli.main(["train", "--data", str(root / "data"), "--config", str(root / "run.json"), "--out", str(root / "run")]) == 0
    return root


def test_shipped_schema_matches_code():
    shipped = json.loads((ROOT / "docs" / "runconfig.schema.json").read_text())
    assert shipped == json.loads(json.dumps(cli.RUN_CONFIG_SCHEMA))


def test_schema_defaults_are_training_defaults():
    props = cli.RUN_CONFIG_SCHEMA["properties"]
    assert props["batch_size"]["default"] == 4
    assert props["lr_prn"]["default"] == 0.01 and props["lr_dtmd"]["default"] == 0.005
    assert props["model"]["properties"]["encoder_channels"]["default"] == [64, 128, 1024]
    assert props["model"]["properties"]["decoder_channels"]["default"] == [512, 256, 16]
    cfg = cli.train_config_from(cli.validate_run_config({}), seed=0)
    assert cfg == cli.TrainConfig()


@pytest.mark.parametrize(
    "doc",
    [
        {"unknown": 1},
        {"weights": {"centroid": 0.1, "extra": 2}},
        {"batch_size": 0},
        {"weights": {"denoise": -1}},
        {"schedule": {"beta_min": 0.5, "beta_max": 0.1}},
        {"augment": {"k_min": 9, "k_max": 3}},
        {"model": {"decoder_channels": [8, 4]}},
        {"model": {"time_dim": 7}},
    ],
)
def test_bad_configs_are_schema_errors(doc):
    with pytest.raises(cli.CliError) as info:
        cli.validate_run_config(doc)
    assert info.value.kind == "schema"


def test_gen_data_split_sizes(tmp_path, capsys):
    code, out, _ = run(["gen-data", "--out", tmp_path / "d", "--count", 124, "--seed", 1], capsys)
    assert code == 0
    assert json.loads(out)["splits"] == {"train": 74, "val": 20, "test": 30}
    manifest = ds.load_manifest(tmp_path / "d")
    assert [len(manifest.ids(s)) for s in ds.SPLIT_NAMES] == [74, 20, 30]
    assert len(ds.load_split(tmp_path / "d", "test")) == 30


def test_gen_data_idempotent_and_seed_env(tmp_path, capsys, monkeypatch):
    run(["gen-data", "--out", tmp_path / "a", "--count", 3, "--seed", 5], capsys)
    monkeypatch.setenv(cli.SEED_ENV, "5")
    run(["gen-data", "--out", tmp_path / "b", "--count", 3], capsys)
    monkeypatch.setenv(cli.SEED_ENV, "6")
    run(["gen-data", "--out", tmp_path / "c", "--count", 3], capsys)
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a" / "sample_0000.tald").read_bytes() != (tmp_path / "c" / "sample_0000.tald").read_bytes()


def test_seed_env_must_be_integer(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "abc")
    code, _, err = run(["gen-data", "--out", tmp_path / "d", "--count", 2], capsys)
    assert code == cli.EXIT_CODES["invalid-argument"] and error_of(err)["error"] == "invalid-argument"


def test_gen_data_perturbation_flags(tmp_path, capsys):
    run(["gen-data", "--out", tmp_path / "d", "--count", 2, "--seed", 0, "--perturb-angle", 0, "--perturb-shift", 0], capsys)
    for s in ds.load_split(tmp_path / "d", "train"):
        np.testing.assert_allclose(s.target, np.tile(np.eye(4), (32, 1, 1)), atol=1e-6)


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    for name in ("prn.ckpt", "dtmd.ckpt", "dtmd_stage1.ckpt", "trace.csv", "val_metrics.json", "run_config.json"):
        assert (run_dir / name).is_file()
    resolved = json.loads((run_dir / "run_config.json").read_text())
    assert resolved["seed"] == 0 and resolved["epochs_stage1"] == 1


def test_eval_matches_training_validation(workspace, capsys, tmp_path):
    code, out, _ = run(["eval", "--data", workspace / "data", "--checkpoint", workspace / "run", "--split", "val",
                        "--csv", tmp_path / "m.csv"], capsys)
    assert code == 0
    report = json.loads(out)
    final = json.loads((workspace / "run" / "val_metrics.json").read_text())[-1]
    for key in ("tre_mean", "tre_std", "aae_mean", "aae_std"):
        assert report[key] == final[key]
    assert report["count"] == len(ds.load_manifest(workspace / "data").ids("val"))
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert [r["id"] for r in rows] == [s["id"] for s in report["samples"]]


def test_infer_without_dtmd_then_export(workspace, capsys, tmp_path):
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    (run_dir / "prn.ckpt").write_bytes((workspace / "run" / "prn.ckpt").read_bytes())
    sample_file = workspace / "data" / "sample_0000.tald"
    out = tmp_path / "aligned.tald"
    code, _, err = run(["infer", "--input", sample_file, "--checkpoint", run_dir, "--out", out], capsys)
    assert code == 0, err
    src, res = ds.read_sample(sample_file), ds.read_sample(out)
    assert np.array_equal(res.validity, src.validity)
    expected = geo.apply_transform(res.target, src.input.points)[src.validity]
    np.testing.assert_allclose(res.input.points[src.validity], expected, atol=1e-3)
    assert np.all(res.target[:, 3] == [0, 0, 0, 1])

    again = tmp_path / "again.tald"
    run(["infer", "--input", sample_file, "--checkpoint", run_dir / "prn.ckpt", "--out", again], capsys)
    assert again.read_bytes() == out.read_bytes()

    ply = tmp_path / "aligned.ply"
    assert run(["export", "--input", out, "--format", "ply", "--out", ply], capsys)[0] == 0
    text = ply.read_text().splitlines()
    end = text.index("end_header")
    assert "element vertex 4096" in text[:end]
    body = text[end + 1 :]
    assert len(body) == 4096
    assert {int(line.split()[3]) for line in body} == set(range(32))


def test_export_ply_with_transforms(workspace, capsys, tmp_path):
    sample_file = workspace / "data" / "sample_0001.tald"
    ply = tmp_path / "t.ply"
    run(["export", "--input", sample_file, "--transforms", sample_file, "--format", "ply", "--out", ply], capsys)
    s = ds.read_sample(sample_file)
    lines = ply.read_text().splitlines()
    body = np.array([[float(v) for v in line.split()[:3]] for line in lines[lines.index("end_header") + 1 :]])
    np.testing.assert_allclose(body.reshape(32, 128, 3)[s.validity], s.aligned_points()[s.validity], atol=1e-4)


def test_export_csv_decomposition(workspace, capsys, tmp_path):
    sample_file = workspace / "data" / "sample_0002.tald"
    out = tmp_path / "t.csv"
    assert run(["export", "--input", sample_file, "--format", "csv", "--out", out], capsys)[0] == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 32 and list(rows[0]) == cli.CSV_COLUMNS
    s = ds.read_sample(sample_file)
    for i, row in enumerate(rows):
        m = np.array([float(row[f"m{r}{c}"]) for r in range(4) for c in range(4)]).reshape(4, 4)
        assert np.array_equal(m, s.target[i])
        angles = [float(row[k]) for k in ("euler_x", "euler_y", "euler_z")]
        np.testing.assert_allclose(geo.euler_to_rotation(angles), m[:3, :3], atol=1e-6)
        assert [float(row[k]) for k in ("tx", "ty", "tz")] == m[:3, 3].tolist()


def test_error_missing_file(capsys, tmp_path):
    code, _, err = run(["infer", "--input", tmp_path / "none.tald", "--checkpoint", tmp_path, "--out", tmp_path / "o"], capsys)
    assert code == cli.EXIT_CODES["missing-file"] and error_of(err)["error"] == "missing-file"


def test_error_checkpoint_kind(workspace, capsys, tmp_path):
    code, _, err = run(["eval", "--data", workspace / "data", "--checkpoint", workspace / "run" / "dtmd.ckpt"], capsys)
    assert code == cli.EXIT_CODES["checkpoint"] and error_of(err)["error"] == "checkpoint"
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"\x05\x00")
    code, _, err = run(["eval", "--data", workspace / "data", "--checkpoint", junk], capsys)
    assert code == cli.EXIT_CODES["checkpoint"]


def test_error_format(workspace, capsys, tmp_path):
    bad = tmp_path / "bad.tald"
    bad.write_bytes(b"NOPE" + bytes(40))
    code, _, err = run(["infer", "--input", bad, "--checkpoint", workspace / "run", "--out", tmp_path / "o"], capsys)
    assert code == cli.EXIT_CODES["format"]
    assert "offset" in error_of(err)["message"]


def test_error_schema(workspace, capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"augment": {"probability": 2}}))
    code, _, err = run(["train", "--data", workspace / "data", "--config", cfg, "--out", tmp_path / "r"], capsys)
    assert code == cli.EXIT_CODES["schema"] and error_of(err)["message"].startswith("augment/probability")
    cfg.write_text("{not json")
    assert run(["train", "--data", workspace / "data", "--config", cfg, "--out", tmp_path / "r"], capsys)[0] == cli.EXIT_CODES["schema"]


def test_error_usage(capsys):
    code, _, err = run(["eval", "--data", "x"], capsys)
    assert code == cli.EXIT_CODES["usage"] and error_of(err)["error"] == "usage"


def test_exit_codes_distinct():
    assert len(set(cli.EXIT_CODES.values())) == len(cli.EXIT_CODES)
    assert 0 not in cli.EXIT_CODES.values() and 1 not in cli.EXIT_CODES.values()


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "talign", "gen-data", "--out", str(tmp_path / "d"), "--count", "1"],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["count"] == 1
