"""Tensor container format, run-config validation, CLI round trips."""

import json
import os
import struct

import numpy as np
import pytest

from ipdloc.container import ContainerError, load_tensors, save_tensors
from ipdloc.cli import main
from ipdloc.runconfig import ConfigError, load_run_config, parse_run_config


# ---------------------------------------------------------------------------
# Container format


def test_container_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(100)
    tensors = {
        "model/w": rng.standard_normal((3, 4)).astype(np.float32),
        "model/b": rng.standard_normal(4).astype(np.float32),
        "meta/scalar": np.float32(2.5),
    }
    path = tmp_path / "weights.ipdw"
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert list(loaded) == list(tensors)  # insertion order preserved
    for name, want in tensors.items():
        got = loaded[name]
        assert got.dtype == np.float32
        np.testing.assert_array_equal(
            got.reshape(-1), np.asarray(want, dtype=np.float32).reshape(-1)
        )
    # 0-d input is stored as a length-1 vector
    assert loaded["meta/scalar"].shape == (1,)


def test_container_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ipdw"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ContainerError, match="magic"):
        load_tensors(path)


def test_container_rejects_wrong_version(tmp_path):
    path = tmp_path / "v9.ipdw"
    path.write_bytes(b"IPDW" + struct.pack("<II", 9, 0))
    with pytest.raises(ContainerError, match="version"):
        load_tensors(path)


def test_container_rejects_truncation_and_trailing_bytes(tmp_path):
    path = tmp_path / "t.ipdw"
    save_tensors(path, {"x": np.arange(6, dtype=np.float32)})
    blob = path.read_bytes()
    (tmp_path / "cut.ipdw").write_bytes(blob[:-5])
    with pytest.raises(ContainerError, match="truncated"):
        load_tensors(tmp_path / "cut.ipdw")
    (tmp_path / "fat.ipdw").write_bytes(blob + b"\x00\x00")
    with pytest.raises(ContainerError, match="trailing"):
        load_tensors(tmp_path / "fat.ipdw")


def test_container_rejects_duplicate_names(tmp_path):
    name = b"w"
    tensor = struct.pack("<I", len(name)) + name + struct.pack("<II", 1, 1)
    tensor += struct.pack("<f", 1.0)
    blob = b"IPDW" + struct.pack("<II", 1, 2) + tensor + tensor
    path = tmp_path / "dup.ipdw"
    path.write_bytes(blob)
    with pytest.raises(ContainerError, match="duplicate"):
        load_tensors(path)


def test_container_error_is_a_value_error():
    assert issubclass(ContainerError, ValueError)


# ---------------------------------------------------------------------------
# Run configuration


def test_run_config_defaults():
    cfg = parse_run_config({})
    assert cfg.geometry.num_mics == 2
    assert np.isclose(cfg.geometry.pair_distance(1), 0.04)
    assert cfg.model.variant == "fixed"
    assert cfg.model.num_channels == 2
    assert cfg.model.hidden == 128
    assert cfg.train.non_source_mode == "bessel"
    assert cfg.localize.detection_threshold == 0.5


def test_run_config_rejects_unknown_keys_with_context():
    with pytest.raises(ConfigError, match=r"config\.model: unknown key 'hiden'"):
        parse_run_config({"model": {"hiden": 64}})
    with pytest.raises(ConfigError, match=r"config\.train: unknown key"):
        parse_run_config({"train": {"momentum": 0.9}})
    with pytest.raises(ConfigError, match="unknown key 'extra'"):
        parse_run_config({"extra": 1})


def test_run_config_rt60_range_is_cited():
    with pytest.raises(ConfigError, match=r"\[0.2, 1.3\]"):
        parse_run_config(
            {"simulate": {"room": {"enabled": True, "rt60": [0.2, 2.0]}}}
        )


def test_run_config_channel_mismatch():
    data = {
        "geometry": {"positions": [[0, 0, 0], [0.04, 0, 0], [0.08, 0, 0]]},
        "model": {"num_channels": 2},
    }
    with pytest.raises(ConfigError, match="does not match"):
        parse_run_config(data)


def test_run_config_value_checks():
    with pytest.raises(ConfigError, match="positions"):
        parse_run_config({"geometry": {"positions": [[0, 0, 0]]}})
    with pytest.raises(ConfigError, match=r"snr_db"):
        parse_run_config({"simulate": {"snr_db": [0.0, 99.0]}})
    with pytest.raises(ConfigError, match="low 3.0 exceeds high 1.0"):
        parse_run_config({"simulate": {"duration": [3.0, 1.0]}})
    with pytest.raises(ConfigError, match="expected an integer"):
        parse_run_config({"train": {"epochs": 2.5}})
    with pytest.raises(ConfigError, match="expected true/false"):
        parse_run_config({"model": {"use_fullband": "yes"}})
    # a reverberant config must keep sources inside the smallest room
    with pytest.raises(ConfigError, match="smallest room"):
        parse_run_config(
            {"simulate": {"room": {"enabled": True, "x": [6.0, 7.0]},
                          "source_distance": [1.0, 5.0]}}
        )
    assert parse_run_config({"simulate": {"snr_db": None}}).simulate.snr_db is None
    half = parse_run_config({"simulate": {"azimuth_deg": [0.0, 180.0]}})
    assert half.simulate.azimuth_deg == (0.0, 180.0)
    with pytest.raises(ConfigError, match="azimuth_deg"):
        parse_run_config({"simulate": {"azimuth_deg": [0.0, 540.0]}})


def test_load_run_config_errors(tmp_path):
    missing = tmp_path / "none.json"
    with pytest.raises(ConfigError, match="none.json"):
        load_run_config(str(missing))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_run_config(str(bad))
    scalar = tmp_path / "scalar.json"
    scalar.write_text("3")
    with pytest.raises(ConfigError, match="top level"):
        load_run_config(str(scalar))


# ---------------------------------------------------------------------------
# CLI round trip on a tiny dataset


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def config_path(workdir):
    cfg = {
        "seed": 0,
        "geometry": {"positions": [[-0.02, 0.0, 0.0], [0.02, 0.0, 0.0]]},
        "model": {"hidden": 8, "num_blocks": 1, "max_sources": 1, "mode": "online"},
        "train": {"epochs": 1, "batch_size": 4},
    }
    path = workdir / "run.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def dataset(workdir, config_path):
    out = workdir / "data"
    assert main(["simulate", "--config", config_path, "--out", str(out),
                 "--count", "6"]) == 0
    return str(out)


@pytest.fixture(scope="module")
def train_run(workdir, config_path, dataset):
    out = workdir / "run"
    assert main(["train", "--config", config_path, "--data", dataset,
                 "--out", str(out)]) == 0
    return str(out)


@pytest.fixture(scope="module")
def infer_run(workdir, dataset, train_run):
    out = workdir / "infer"
    assert main(["infer", "--checkpoint", os.path.join(train_run, "best"),
                 "--data", dataset, "--out", str(out),
                 "--grid-resolution", "10"]) == 0
    return str(out)


def test_simulate_is_reproducible(workdir, config_path, dataset):
    again = workdir / "data2"
    assert main(["simulate", "--config", config_path, "--out", str(again),
                 "--count", "6"]) == 0
    first = open(os.path.join(dataset, "utt00000", "mixture.wav"), "rb").read()
    second = open(str(again / "utt00000" / "mixture.wav"), "rb").read()
    assert first == second
    m1 = json.load(open(os.path.join(dataset, "manifest.json")))
    m2 = json.load(open(str(again / "manifest.json")))
    assert m1 == m2
    assert m1["count"] == 6 and len(m1["utterances"]) == 6


def test_simulate_empty_dataset(workdir, config_path):
    out = workdir / "empty"
    assert main(["simulate", "--config", config_path, "--out", str(out),
                 "--count", "0"]) == 0
    manifest = json.load(open(str(out / "manifest.json")))
    assert manifest["utterances"] == []


def test_simulate_parallel_matches_serial(workdir, config_path, dataset):
    out = workdir / "data-par"
    assert main(["simulate", "--config", config_path, "--out", str(out),
                 "--count", "4", "--jobs", "2"]) == 0
    for i in range(4):
        name = f"utt{i:05d}"
        serial = open(os.path.join(dataset, name, "mixture.wav"), "rb").read()
        parallel = open(str(out / name / "mixture.wav"), "rb").read()
        assert serial == parallel


def test_train_run_artifacts(train_run):
    for artifact in ("loss.csv", "config-used.json", "geometry.txt",
                     "best", "last"):
        assert os.path.exists(os.path.join(train_run, artifact))
    assert not os.path.exists(os.path.join(train_run, ".lock"))
    state = json.load(open(os.path.join(train_run, "best", "state.json")))
    assert "geometry_fingerprint" in state


def test_infer_run_artifacts(infer_run, dataset):
    summary = json.load(open(os.path.join(infer_run, "summary.json")))
    assert summary["utterances"] == [f"utt{i:05d}" for i in range(6)]
    assert summary["streaming"] is False
    utt = os.path.join(infer_run, "utt00000")
    assert os.path.exists(os.path.join(utt, "estimate.ipdw"))
    header = open(os.path.join(utt, "results.csv")).readline().strip()
    assert header == "frame,track,azimuth,elevation,peak,matched,error"
    from ipdloc.container import load_tensors as load

    est = load(os.path.join(utt, "estimate.ipdw"))["estimate"]
    assert est.ndim == 4 and est.shape[1] == 1 and est.shape[3] == 512


def test_streaming_infer_matches_batch_prefix(workdir, dataset, train_run, infer_run):
    out = workdir / "infer-stream"
    assert main(["infer", "--checkpoint", os.path.join(train_run, "best"),
                 "--data", dataset, "--out", str(out),
                 "--grid-resolution", "10", "--streaming"]) == 0
    from ipdloc.container import load_tensors as load

    batch = load(os.path.join(infer_run, "utt00001", "estimate.ipdw"))["estimate"]
    stream = load(str(out / "utt00001" / "estimate.ipdw"))["estimate"]
    assert stream.shape[0] in (batch.shape[0], batch.shape[0] - 1)
    np.testing.assert_allclose(
        stream, batch[: stream.shape[0]], rtol=0, atol=1e-5
    )
    summary = json.load(open(str(out / "summary.json")))
    assert summary["streaming"] is True


def test_streaming_requires_online_checkpoint(workdir, config_path, dataset, capsys):
    cfg = json.load(open(config_path))
    cfg["model"]["mode"] = "offline"
    offline_cfg = workdir / "offline.json"
    offline_cfg.write_text(json.dumps(cfg))
    run = workdir / "run-offline"
    assert main(["train", "--config", str(offline_cfg), "--data", dataset,
                 "--out", str(run), "--epochs", "1"]) == 0
    out = workdir / "infer-offline"
    code = main(["infer", "--checkpoint", str(run / "last"), "--data", dataset,
                 "--out", str(out), "--streaming"])
    assert code == 1
    assert "online" in capsys.readouterr().err


def test_eval_writes_metrics(workdir, dataset, infer_run, capsys):
    out = workdir / "metrics"
    assert main(["eval", "--infer", infer_run, "--data", dataset,
                 "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "mdr_percent" in printed
    metrics = json.load(open(str(out / "metrics.json")))
    for key in ("mdr", "far", "mae", "active_count", "match_count"):
        assert key in metrics
    report = open(str(out / "report.txt")).read()
    assert f"tolerance_deg {metrics['tolerance_deg']}" in report


def test_eval_threshold_override_changes_detections(workdir, dataset, infer_run, capsys):
    assert main(["eval", "--infer", infer_run, "--data", dataset,
                 "--detection-threshold", "0.999"]) == 0
    strict = capsys.readouterr().out
    # at a threshold this strict nothing is detected, so nothing is matched
    assert "matches 0" in strict


def test_plot_outputs(workdir, config_path, dataset, train_run, infer_run):
    loss_png = workdir / "loss.png"
    assert main(["plot", "--what", "loss", "--run", train_run,
                 "--out", str(loss_png)]) == 0
    assert loss_png.stat().st_size > 0
    assert main(["plot", "--what", "spectrum", "--infer", infer_run,
                 "--data", dataset, "--utt", "utt00000"]) == 0
    assert os.path.getsize(os.path.join(infer_run, "utt00000", "spectrum.png")) > 0
    assert main(["plot", "--what", "trajectory", "--infer", infer_run,
                 "--data", dataset, "--utt", "utt00000"]) == 0
    assert os.path.getsize(os.path.join(infer_run, "utt00000", "trajectory.png")) > 0


def test_lock_contention_exits_one(workdir, config_path, capsys):
    out = workdir / "locked"
    out.mkdir()
    (out / ".lock").write_text("123\n")
    code = main(["simulate", "--config", config_path, "--out", str(out),
                 "--count", "1"])
    assert code == 1
    assert "locked" in capsys.readouterr().err
    (out / ".lock").unlink()


def test_exit_codes(workdir, config_path, dataset, capsys):
    assert main(["simulate", "--config", config_path, "--count", "1"]) == 1
    assert "--out" in capsys.readouterr().err
    assert main(["train", "--config", str(workdir / "nope.json"),
                 "--data", dataset, "--out", str(workdir / "x1")]) == 1
    capsys.readouterr()
    # a missing dataset directory is a runtime failure, not a config error
    assert main(["train", "--config", config_path,
                 "--data", str(workdir / "missing"),
                 "--out", str(workdir / "x2")]) == 2
    capsys.readouterr()


def test_train_rejects_geometry_mismatch(workdir, config_path, dataset, capsys):
    cfg = json.load(open(config_path))
    cfg["geometry"]["positions"] = [[-0.03, 0.0, 0.0], [0.03, 0.0, 0.0]]
    other = workdir / "other-geom.json"
    other.write_text(json.dumps(cfg))
    code = main(["train", "--config", str(other), "--data", dataset,
                 "--out", str(workdir / "x3")])
    assert code == 1
    assert "geometry mismatch" in capsys.readouterr().err
