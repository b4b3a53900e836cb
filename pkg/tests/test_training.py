import hashlib
import io
import struct

import numpy as np
import pytest
from sklearn.base import clone

from loco.contrastive import AugmentConfig, DecoderSpec
from loco.data import make_synthetic
from loco.optim import OptimizerConfig, ScheduleConfig
from loco.topology import RouteReport
from loco.training import (Checkpoint, LinearProbe, LocalContrastiveEncoder, MetricsWriter, ProbeConfig,
                           TrainConfig, config_fingerprint, linear_probe, load_checkpoint,
                           metrics_columns, probe_features, save_checkpoint, train)

HW = (16, 16)


def small_config(topology="loco", arch="toy2", steps=3, precision="float32", seed=0, **kw):
    return TrainConfig(arch=arch, topology=topology,
                       decoder=DecoderSpec(conv_blocks=1, projection_dim=16),
                       augment=AugmentConfig(output_size=HW),
                       optimizer=OptimizerConfig(kind="lars"),
                       schedule=ScheduleConfig(0.5, 1, steps, 1),
                       batch_size=8, precision=precision, seed=seed, **kw)


@pytest.fixture(scope="module")
def data():
    return make_synthetic(64, seed=3, hw=HW)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    cfg = small_config()
    tensors = {"stage0.w": rng.normal(size=(2, 3, 3, 3)).astype(np.float32),
               "scalar": np.array(1.5), "buffer:stage0.bn.mean": np.zeros(4)}
    ckpt = Checkpoint(tensors, 17, config_fingerprint(cfg))
    path = tmp_path / "c.loco"
    save_checkpoint(path, ckpt)
    raw = path.read_bytes()
    assert raw[:4] == b"LOCO" and struct.unpack_from("<I", raw, 4) == (1,)
    assert raw[8:40] == hashlib.sha256(
        __import__("json").dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()).digest()
    back = load_checkpoint(path, cfg)
    assert back.step == 17 and set(back.tensors) == set(tensors)
    for k, v in tensors.items():
        np.testing.assert_array_equal(back.tensors[k], v)
        assert back.tensors[k].shape == np.shape(v)


def test_checkpoint_rejects_mismatch_and_corruption(tmp_path):
    cfg = small_config()
    path = tmp_path / "c.loco"
    save_checkpoint(path, Checkpoint({"a": np.ones(3)}, 1, config_fingerprint(cfg)))
    with pytest.raises(ValueError, match="fingerprint"):
        load_checkpoint(path, small_config(seed=1))
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(ValueError):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + b"\0" * 60)
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_training_is_deterministic(data, tmp_path):
    outs = []
    for i in range(2):
        res = train(small_config("loco", checkpoint_every=2), data)
        p = tmp_path / f"{i}.loco"
        save_checkpoint(p, res.checkpoint)
        outs.append((p.read_bytes(), [{k: v for k, v in r.items() if k != "wall_ms"} for r in res.metrics]))
    assert outs[0][0] == outs[1][0]
    assert outs[0][1] == outs[1][1]


def test_e2e_and_single_unit_loco_share_trajectory(data):
    a = train(small_config("e2e", precision="float64", steps=3), data)
    b = train(small_config("loco", precision="float64", steps=3), data)
    assert set(a.checkpoint.tensors) == set(b.checkpoint.tensors)
    for k in a.checkpoint.tensors:
        np.testing.assert_array_equal(a.checkpoint.tensors[k], b.checkpoint.tensors[k])


def test_metrics_records_and_sinks(data):
    seen, ckpts = [], []
    res = train(small_config("loco", arch="toy3", checkpoint_every=2, steps=4), data,
                metrics_sink=seen.append, checkpoint_sink=ckpts.append)
    assert list(seen[0]) == metrics_columns(2)
    assert [r["step"] for r in seen] == [0, 1, 2, 3]
    assert [c.step for c in ckpts] == [2, 4, 4]
    assert res.route.backward_counts == [1, 2, 1]
    assert seen[0]["lr"] == 0.0


def test_train_errors(data):
    with pytest.raises(ValueError):
        TrainConfig(batch_size=2)
    with pytest.raises(ValueError):
        train(small_config(), make_synthetic(4, seed=0, hw=HW))


def test_nonfinite_loss_aborts(data):
    cfg = small_config()
    res = train(cfg, data)
    net = res.network

    def broken(views, training=True):
        return RouteReport([1, 1], [0, 0], [float("nan")])

    net.forward_once = broken
    with pytest.raises(FloatingPointError, match="unit 0"):
        train(cfg, data, network=net)


def test_metrics_writer_header_once():
    buf = io.StringIO()
    w = MetricsWriter(buf, flush_every=2)
    cols = metrics_columns(3)
    for s in range(3):
        w.write({c: s for c in cols})
    w.close()
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(cols) and len(lines) == 4
    assert sum(line.startswith("step") for line in lines) == 1
    assert [c for c in cols if c.startswith("unit_")] == ["unit_0_loss", "unit_1_loss", "unit_2_loss"]
    assert [c for c in metrics_columns(1) if c.endswith("_loss")] == ["unit_0_loss"]
    with pytest.raises(ValueError):
        w.write({"other": 1})


# -- probe ------------------------------------------------------------------

FAST = ProbeConfig(epochs=20, lr_grid=(1.0, 10.0))


def test_probe_one_hot_features_are_perfect():
    labels = np.repeat(np.arange(10), 30)
    acc, _ = probe_features(np.eye(10)[labels], labels, FAST)
    assert acc == 1.0


def test_probe_shuffled_labels_at_chance():
    rng = np.random.default_rng(0)
    accs = []
    for seed in range(5):
        feats = rng.normal(size=(1000, 16))
        labels = rng.permutation(np.repeat(np.arange(10), 100))
        accs.append(probe_features(feats, labels, ProbeConfig(epochs=10, lr_grid=(1.0,), seed=seed))[0])
    assert abs(np.mean(accs) - 0.1) <= 0.05


def test_probe_single_class_errors():
    with pytest.raises(ValueError):
        probe_features(np.ones((20, 3)), np.zeros(20), FAST)
    with pytest.raises(ValueError):
        LinearProbe().fit(np.ones((5, 2)), np.zeros(5))


def test_probe_leaves_encoder_untouched(data):
    res = train(small_config(), data)
    before = {k: v.tobytes() for k, v in res.network.store.state_dict().items()}
    acc = linear_probe(res, data, ProbeConfig(epochs=2, lr_grid=(1.0,)))
    after = {k: v.tobytes() for k, v in res.network.store.state_dict().items()}
    assert before == after
    assert 0.0 <= acc <= 1.0
    acc2 = linear_probe(res.checkpoint, data, ProbeConfig(epochs=2, lr_grid=(1.0,)), small_config())
    assert acc2 == acc


def test_linear_probe_estimator_api():
    p = LinearProbe(lr=3.0, epochs=5)
    assert p.get_params()["lr"] == 3.0
    q = clone(p).set_params(epochs=7)
    assert q.epochs == 7 and p.epochs == 5
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal(-2, 1, (50, 2)), rng.normal(2, 1, (50, 2))])
    y = np.array(["a"] * 50 + ["b"] * 50)
    q.fit(X, y)
    assert q.score(X, y) > 0.9
    assert set(q.predict(X)) <= {"a", "b"}


def test_encoder_estimator(data):
    enc = LocalContrastiveEncoder(arch="toy2", batch_size=8, steps=2, warmup_steps=1,
                                  augment={"output_size": HW},
                                  decoder={"conv_blocks": 0, "projection_dim": 8})
    params = enc.get_params()
    assert params["topology"] == "loco" and params["steps"] == 2
    assert clone(enc).get_params()["augment"] == {"output_size": HW}
    Z = enc.fit(data.images).transform(data.images[:5])
    assert Z.shape == (5, 16)
    assert len(enc.get_feature_names_out()) == 16
    assert len(enc.metrics_) == 2
    with pytest.raises(ValueError):
        enc.transform(np.zeros((2, 3, 16)))
    with pytest.raises(Exception):
        LocalContrastiveEncoder().transform(data.images[:2])
