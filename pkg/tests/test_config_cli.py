import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from loco.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, run
from loco.config import ConfigError, load_config, parse_config, serialize
from loco.data import ImageDataset, make_synthetic, read_raw, write_raw
from loco.training import load_checkpoint

TINY = {
    "arch": "toy2",
    "topology": "loco",
    "batch_size": 8,
    "augment": {"output_size": [16, 16]},
    "decoder": {"conv_blocks": 0, "projection_dim": 8},
    "schedule": {"base_lr": 0.5, "warmup_epochs": 1, "total_epochs": 2, "steps_per_epoch": 1},
    "dataset": {"synthetic": {"seed": 1, "size": 32}, "hw": [16, 16]},
    "probe_dataset": {"synthetic": {"seed": 2, "size": 60}, "hw": [16, 16]},
    "probe": {"epochs": 2, "lr_grid": [1.0]},
}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


# -- config ----------------------------------------------------------------


def test_minimal_config_defaults(tmp_path):
    cfg = load_config(write_json(tmp_path / "c.json", {"arch": "toy3", "topology": "loco"}), env={})
    assert cfg.train.temperature == 0.1 and cfg.train.batch_size == 128
    assert cfg.dataset.kind == "synthetic"


def test_single_stage_loco_accepted():
    arch = {"stem": {"in_channels": 3, "out_channels": 4, "kernel": [3, 3], "stride": [1, 1],
                     "padding": [1, 1]},
            "stages": [{"name": "only", "out_hw": [8, 8], "base_channels": 4,
                        "blocks": [{"kind": "basic", "convs": [
                            {"in_channels": 4, "out_channels": 4, "kernel": [3, 3], "stride": [1, 1],
                             "padding": [1, 1]}]}]}],
            "input_hw": [8, 8]}
    cfg = parse_config({"arch": arch, "topology": "loco"}, env={})
    assert len(cfg.train.topology_spec().units) == 1


def test_unknown_key_suggestion():
    with pytest.raises(ConfigError, match="topology"):
        parse_config({"arch": "toy3", "topolgy": "loco"}, env={})
    with pytest.raises(ConfigError, match="base_lr"):
        parse_config({"schedule": {"base_lrr": 1.0}}, env={})


@pytest.mark.parametrize("bad", [
    {"arch": "toy0"}, {"arch": "nope"}, {"topology": "loko"}, {"batch_size": 2},
    {"batch_size": "8"}, {"seed": 1.5}, {"dataset": {"raw": "x", "synthetic": {}}},
    {"dataset": {}}, {"metrics_every": 0}, {"optimizer": {"kind": "adam"}},
    {"topology": "share_blocks(1)"},
])
def test_invalid_configs_name_the_field(bad):
    with pytest.raises(ConfigError):
        parse_config(bad, env={})


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "arch": "toy3",\n  oops\n}')
    with pytest.raises(ConfigError, match=r"bad\.json:3:"):
        load_config(p)


def test_seed_env_override():
    assert parse_config({"seed": 3}, env={"LOCO_SEED": "11"}).train.seed == 11
    with pytest.raises(ConfigError):
        parse_config({}, env={"LOCO_SEED": "x"})


def test_serialize_round_trip():
    for obj in ({}, TINY, {"topology": "soft_share(0.01)", "dataset": {"raw": "d.lcim"}}):
        cfg = parse_config(obj, env={})
        again = parse_config(json.loads(serialize(cfg)), env={})
        assert again == cfg
        assert again.fingerprint == cfg.fingerprint


# -- raw data --------------------------------------------------------------


def test_raw_round_trip(tmp_path):
    ds = make_synthetic(12, seed=0, hw=(8, 6))
    write_raw(tmp_path / "a.lcim", ds)
    back = read_raw(tmp_path / "a.lcim")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    raw = (tmp_path / "a.lcim").read_bytes()
    assert len(raw) == 18 + 12 * 8 * 6 * 3 + 2 * 12
    write_raw(tmp_path / "b.lcim", ImageDataset(ds.images))
    assert read_raw(tmp_path / "b.lcim").labels is None
    (tmp_path / "c.lcim").write_bytes(raw[:-1])
    with pytest.raises(ValueError):
        read_raw(tmp_path / "c.lcim")


def test_synthetic_is_seeded_and_balanced_enough():
    a = make_synthetic(500, seed=4)
    b = make_synthetic(500, seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(a.images, make_synthetic(500, seed=5).images)
    assert set(np.unique(a.labels)) == set(range(10))
    with pytest.raises(ValueError):
        make_synthetic(10, n_classes=11)


# -- command line ----------------------------------------------------------


def test_gen_data_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(["gen-data", "--out", str(tmp_path / f"{name}.lcim"), "--size", "20", "--seed", "5",
                    "--hw", "12"]) == EXIT_OK
    assert (tmp_path / "a.lcim").read_bytes() == (tmp_path / "b.lcim").read_bytes()
    assert len(read_raw(tmp_path / "a.lcim")) == 20


def test_analyze_memory_resnet_gim(capsys):
    assert run(["analyze-memory", "--arch", "resnet50", "--topology", "gim", "--overhead", "0"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["ratio"] == pytest.approx(1 / 0.4364, rel=5e-3)


def test_analyze_memory_fit(capsys):
    assert run(["analyze-memory", "--fractions", ".4364,.2909,.2182,.0545", "--topology", "loco",
                "--target", "1.81", "--fit-topology", "gim"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["fitted_overhead"] == pytest.approx(0.2594, abs=1e-4)
    assert out["ratio"] == pytest.approx(1.276, abs=1e-3)


def test_simulate_parallel(tmp_path, capsys):
    tl = tmp_path / "t.csv"
    assert run(["simulate-parallel", "--stages", "2", "--micro", "1", "--topology", "gim",
                "--timeline", str(tl)]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["makespan"] == 3
    assert tl.read_text().splitlines()[0] == "event,worker,t_start,t_end"
    assert run(["simulate-parallel", "--stages", "3", "--fwd", "1,1"]) == EXIT_CONFIG


def test_gradcheck_command(capsys):
    assert run(["gradcheck", "--arch", "toy3", "--topology", "loco"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "max relative error" in out
    assert run(["gradcheck", "--arch", "toy2", "--topology", "gim", "--tol", "1e-30"]) == EXIT_CHECK


def test_train_and_probe(tmp_path, capsys):
    cfg = write_json(tmp_path / "run.json", TINY)
    out = tmp_path / "out"
    assert run(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",") == ["step", "epoch", "lr", "unit_0_loss", "penalty", "wall_ms"]
    assert len(lines) == 3
    assert json.loads((out / "route.json").read_text())["forward_counts"] == [1, 1]
    saved = load_config(out / "config.json")
    ckpt = load_checkpoint(out / "checkpoint.loco", saved.train)
    assert ckpt.step == 2
    capsys.readouterr()
    assert run(["probe", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.loco"),
                "--out", str(out / "probe.json")]) == EXIT_OK
    acc = json.loads((out / "probe.json").read_text())["accuracy"]
    assert 0.0 <= acc <= 1.0


def test_train_is_deterministic_via_cli(tmp_path):
    cfg = write_json(tmp_path / "run.json", TINY)
    for name in ("a", "b"):
        assert run(["train", "--config", str(cfg), "--out", str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / "a/checkpoint.loco").read_bytes() == (tmp_path / "b/checkpoint.loco").read_bytes()


def test_exit_codes(tmp_path, capsys):
    assert run([]) == EXIT_CONFIG
    assert run(["frobnicate"]) == EXIT_CONFIG
    assert run(["train", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    bad = write_json(tmp_path / "bad.json", {"topolgy": "loco"})
    assert run(["train", "--config", str(bad)]) == EXIT_CONFIG
    assert "did you mean 'topology'" in capsys.readouterr().err
    cfg = write_json(tmp_path / "run.json", TINY)
    (tmp_path / "junk.loco").write_bytes(b"junk")
    assert run(["probe", "--config", str(cfg), "--checkpoint", str(tmp_path / "junk.loco")]) == EXIT_RUNTIME


@pytest.mark.skipif(shutil.which("loco") is None, reason="console script not installed")
def test_console_script():
    res = subprocess.run(["loco", "simulate-parallel", "--stages", "2"], capture_output=True, text=True)
    assert res.returncode == 0 and '"makespan": 4.0' in res.stdout
    res = subprocess.run([sys.executable, "-m", "loco.cli", "gen-data"], capture_output=True, text=True)
    assert res.returncode == EXIT_CONFIG
