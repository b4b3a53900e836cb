import numpy as np
import pytest

from loco.autograd import Graph, ParamStore, ShapeError
from loco.contrastive import (AugmentConfig, ContrastiveBatch, DecoderSpec, augment, augment_batch,
                              build_decoder, info_nce, project)


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# -- augmentation ------------------------------------------------------------


def test_augment_is_deterministic():
    img = np.random.default_rng(0).uniform(size=(3, 32, 32))
    a = augment(img, AugmentConfig(), 7)
    b = augment(img, AugmentConfig(), 7)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


def test_degenerate_config_returns_resized_original():
    img = np.random.default_rng(1).uniform(size=(3, 16, 16))
    cfg = AugmentConfig(crop_scale=(1, 1), ratio=(1, 1), output_size=(16, 16), color_strength=0,
                        blur_prob=0, flip_prob=0)
    v1, v2 = augment(img, cfg, 3)
    np.testing.assert_array_equal(v1, img)
    np.testing.assert_array_equal(v2, img)


def test_default_views_differ():
    img = np.random.default_rng(2).uniform(size=(3, 32, 32))
    same = sum(np.array_equal(*augment(img, AugmentConfig(), s)) for s in range(1000))
    assert same <= 10


def test_augment_output_size_and_errors():
    img = np.random.default_rng(3).uniform(size=(3, 40, 24))
    v1, v2 = augment(img, AugmentConfig(output_size=(20, 20)), 0)
    assert v1.shape == v2.shape == (3, 20, 20)
    with pytest.raises(ValueError):
        augment(np.zeros((3, 2, 2)), AugmentConfig(crop_scale=(0.1, 1.0)), 0)
    with pytest.raises(ValueError):
        AugmentConfig(flip_prob=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(crop_scale=(0.5, 0.2))


def test_augment_batch_interleaves_pairs():
    imgs = np.random.default_rng(4).uniform(size=(3, 3, 32, 32))
    out = augment_batch(imgs, AugmentConfig(), [5, 6, 7])
    assert out.shape == (6, 3, 32, 32)
    v1, v2 = augment(imgs[1], AugmentConfig(), 6)
    np.testing.assert_array_equal(out[2], v1)
    np.testing.assert_array_equal(out[3], v2)


# -- decoders ----------------------------------------------------------------


def _decoder_shapes(spec, c, hw):
    dec = build_decoder(spec, c, hw)
    g = Graph(ParamStore(0, np.float64))
    x = g.input("x", (2, c) + hw)
    z = dec.apply(g, x, "d")
    gap = next(n for n in g.nodes if n.op == "global_avg_pool")
    pre_gap = g.nodes[gap.inputs[0]].shape
    return dec, g.shape(z), pre_gap


def test_decoder_structure():
    dec, out, pre = _decoder_shapes(DecoderSpec(conv_blocks=0, projection_dim=128), 2048, (2, 2))
    assert out == (2, 128) and pre == (2, 2048, 2, 2)
    assert dec.n_blocks == 0
    _, _, pre = _decoder_shapes(DecoderSpec(conv_blocks=1, downsample=True), 4, (56, 56))
    assert pre[2:] == (28, 28)
    _, _, pre = _decoder_shapes(DecoderSpec(conv_blocks=1, downsample=False), 4, (56, 56))
    assert pre[2:] == (56, 56)
    with pytest.raises(ShapeError):
        build_decoder(DecoderSpec(conv_blocks=1, downsample=True), 4, (1, 1))
    with pytest.raises(ValueError):
        DecoderSpec(mlp_layers=1)


def test_decoder_param_count_reported():
    dec = build_decoder(DecoderSpec(conv_blocks=0, projection_dim=16), 8, (4, 4))
    # fc0 weight + bn gamma/beta, fc1 weight + bias
    assert dec.param_count() == 8 * 8 + 2 * 8 + 16 * 8 + 16


def test_project_unit_norm_and_scale_invariance():
    rng = np.random.default_rng(0)
    dec = build_decoder(DecoderSpec(conv_blocks=0, projection_dim=128), 6, (3, 3))
    feats = rng.normal(size=(4, 6, 3, 3))
    z = project(dec, feats, ParamStore(1, np.float64))
    assert z.shape == (4, 128)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)

    g = Graph(ParamStore(0, np.float64))
    v = g.input("v", (3, 5))
    n = g.l2_normalize(v)
    x = rng.normal(size=(3, 5))
    a = g.forward({"v": x})[n].copy()
    b = g.forward({"v": 5 * x})[n]
    np.testing.assert_allclose(a, b, rtol=1e-14)


# -- objective ---------------------------------------------------------------


def test_info_nce_two_candidate_examples():
    # anchor with one positive (sim 1) and one negative (sim 0); N=2 gives 3 candidates,
    # so the example is reproduced with the graph op on a hand-built 2-vector case
    q = np.array([1.0, 0.0])
    for tau, expect in [(1.0, -np.log(np.e / (np.e + 1))), (0.1, np.log1p(np.exp(-10)))]:
        s_pos, s_neg = q @ q / tau, q @ np.array([0.0, 1.0]) / tau
        loss = -(s_pos - np.logaddexp(s_pos, s_neg))
        assert loss == pytest.approx(expect, rel=1e-12)
    assert -np.log(np.e / (np.e + 1)) == pytest.approx(0.3133, abs=1e-4)
    assert np.log1p(np.exp(-10)) == pytest.approx(4.54e-5, rel=1e-3)


def test_info_nce_matches_hand_formula():
    rng = np.random.default_rng(0)
    z = unit_rows(rng, 8, 5)
    tau = 0.3
    total = 0.0
    for i in range(8):
        j = i ^ 1
        sims = np.array([z[i] @ z[k] / tau for k in range(8) if k != i])
        total += -(z[i] @ z[j] / tau) + np.log(np.exp(sims).sum())
    assert info_nce(ContrastiveBatch(z, tau)) == pytest.approx(total / 8, rel=1e-12)


def test_info_nce_uniform_similarities():
    # regular simplex in 4 dims: every pair has the same similarity
    z = np.eye(4)
    assert info_nce(ContrastiveBatch(z, 0.5)) == pytest.approx(np.log(3), rel=1e-12)


def test_info_nce_graph_op_matches_reference():
    rng = np.random.default_rng(1)
    z = unit_rows(rng, 10, 7)
    g = Graph(ParamStore(0, np.float64))
    x = g.input("z", z.shape)
    loss = g.info_nce(x, 0.2)
    assert float(g.forward({"z": z})[loss]) == pytest.approx(info_nce(ContrastiveBatch(z, 0.2)), rel=1e-12)


def test_info_nce_invariances():
    rng = np.random.default_rng(2)
    z = unit_rows(rng, 12, 6)
    base = info_nce(ContrastiveBatch(z, 0.1))
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    rotated = info_nce(ContrastiveBatch(z @ q, 0.1))
    assert abs(rotated - base) / base < 1e-10
    # swapping whole pairs permutes every anchor's negatives
    perm = np.array([4, 5, 0, 1, 10, 11, 2, 3, 8, 9, 6, 7])
    assert abs(info_nce(ContrastiveBatch(z[perm], 0.1)) - base) / base < 1e-10


def test_info_nce_decreases_with_positive_similarity():
    rng = np.random.default_rng(3)
    z = unit_rows(rng, 4, 3)
    prev = None
    for t in np.linspace(0, 1, 6):
        k = (1 - t) * z[1] + t * z[0]
        zz = z.copy()
        zz[1] = k / np.linalg.norm(k)
        # only anchor 0's term is tracked; its negatives stay fixed
        s = zz @ zz.T / 0.1
        val = -s[0, 1] + np.log(np.exp(s[0, 1:]).sum())
        if prev is not None:
            assert val < prev
        prev = val


def test_info_nce_random_vectors_near_log_candidates():
    n = 64
    for seed in range(10):
        z = unit_rows(np.random.default_rng(seed), 2 * n, 128)
        loss = info_nce(ContrastiveBatch(z, 1.0))
        assert abs(loss - np.log(2 * n - 1)) / np.log(2 * n - 1) < 0.1


def test_contrastive_batch_validation():
    z = unit_rows(np.random.default_rng(0), 4, 3)
    with pytest.raises(ValueError):
        ContrastiveBatch(z, 0.0)
    with pytest.raises(ValueError):
        ContrastiveBatch(2 * z, 0.1)
    with pytest.raises(ShapeError):
        ContrastiveBatch(z[:2], 0.1)
    assert info_nce(ContrastiveBatch(z, 0.1)) >= 0
