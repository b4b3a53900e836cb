import numpy as np
import pytest

from loco.autograd import (Graph, GraphError, NonFiniteError, ParamStore, ShapeError, backward,
                           eval_forward, finite_diff_grad, gradcheck, max_relative_error)

TOL = 1e-4
EPS = 1e-5


def graph64(seed=0):
    return Graph(ParamStore(seed, np.float64))


def away_from_zero(rng, shape, margin=1e-2):
    x = rng.uniform(-1, 1, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def test_identity_example():
    g = graph64()
    x = g.input("x", (2,))
    y = g.mark("y", g.add(x, g.constant(np.zeros(2))))
    out = eval_forward(g, {"x": np.array([1.0, 2.0])})
    np.testing.assert_array_equal(out["y"], [1.0, 2.0])


def test_sum_of_squares_value_and_grad():
    g = graph64()
    w = g.param("w", (2,))
    g.store["w"] = np.array([1.0, -2.0])
    f = g.sum(g.mul(w, w))
    g.forward()
    assert float(g.value(f)) == 5.0
    np.testing.assert_allclose(backward(g, f)["w"], [2.0, -4.0])

    g2 = graph64()
    x = g2.param("x", (1,))
    g2.store["x"] = np.array([3.0])
    f2 = g2.sum(g2.mul(x, x))
    g2.forward()
    assert float(g2.value(f2)) == 9.0


def test_relu_subgradient():
    g = graph64()
    w = g.param("w", (3,))
    g.store["w"] = np.array([-1.0, 2.0, 0.0])
    f = g.sum(g.relu(w))
    g.forward()
    np.testing.assert_array_equal(backward(g, f)["w"], [0.0, 1.0, 0.0])


def test_stop_gradient_semantics():
    g = graph64()
    x = g.param("x", (3,))
    f = g.sum(g.stop_gradient(x))
    g.forward()
    np.testing.assert_array_equal(backward(g, f)["x"], 0.0)

    g = graph64()
    x = g.param("x", (3,))
    f = g.sum(g.add(x, g.stop_gradient(x)))
    val = g.forward()[f]
    np.testing.assert_array_equal(backward(g, f)["x"], 1.0)
    assert float(val) == pytest.approx(2 * g.store["x"].sum())


def test_stop_marker_between_stages_zeroes_lower_params():
    g = graph64()
    x = g.input("x", (4, 3))
    w1 = g.param("w1", (5, 3))
    w2 = g.param("w2", (2, 5))
    h = g.stop_gradient(g.relu(g.linear(x, w1)))
    f = g.sum(g.linear(h, w2))
    g.forward({"x": np.ones((4, 3))})
    grads = backward(g, f)
    assert np.all(grads["w1"] == 0)
    assert np.any(grads["w2"] != 0)


def test_backward_stop_at_cut():
    g = graph64()
    x = g.input("x", (4, 3))
    w1 = g.param("w1", (5, 3))
    w2 = g.param("w2", (2, 5))
    h = g.relu(g.linear(x, w1))
    f = g.sum(g.linear(h, w2))
    g.forward({"x": np.ones((4, 3))})
    grads, _ = g.backward(f, stop_at=(h,))
    assert np.all(grads["w1"] == 0)
    full, _ = g.backward(f)
    np.testing.assert_array_equal(grads["w2"], full["w2"])


def test_unreachable_params_get_zero():
    g = graph64()
    a = g.param("a", (2,))
    g.param("b", (3,))
    f = g.sum(a)
    g.forward()
    grads = backward(g, f)
    np.testing.assert_array_equal(grads["b"], np.zeros(3))


def test_errors():
    g = graph64()
    x = g.input("x", (2,))
    y = g.relu(x)
    with pytest.raises(GraphError):
        g.backward(g.sum(y))
    with pytest.raises(GraphError):
        g.forward({})
    with pytest.raises(ShapeError):
        g.forward({"x": np.ones(3)})
    g.forward({"x": np.ones(2)})
    with pytest.raises(ShapeError):
        g.backward(y)
    with pytest.raises(ShapeError):
        g.add(g.input("a", (2, 3)), g.input("b", (4,)))


def test_debug_mode_reports_nonfinite_node():
    g = Graph(ParamStore(0, np.float64), debug=True)
    x = g.input("x", (2,))
    y = g.mul(x, x)
    with pytest.raises(NonFiniteError) as err:
        g.forward({"x": np.array([1.0, np.inf])})
    assert str(y) in str(err.value)


def test_finite_diff_examples():
    g = graph64()
    x = g.param("x", (1,))
    g.store["x"] = np.array([3.0])
    f = g.sum(g.mul(x, x))
    g.forward()
    assert finite_diff_grad(g, f, "x", 0, 1e-5) == pytest.approx(6.0, abs=1e-8)
    with pytest.raises(IndexError):
        finite_diff_grad(g, f, "x", (5,), 1e-5)

    g = graph64()
    inp = g.input("inp", (1, 1, 2, 2))
    w = g.param("w", (1, 1, 2, 2))
    f = g.sum(g.conv2d(inp, w))
    g.forward({"inp": np.ones((1, 1, 2, 2))})
    for i in range(4):
        assert finite_diff_grad(g, f, "w", i) == pytest.approx(1.0, abs=1e-9)


def _check(g, loss, tol=TOL):
    errs = gradcheck(g, loss, eps=EPS, max_elements=8)
    assert errs and max(errs.values()) < tol, errs
    for name in g.inputs:
        # inputs are checked through finite_diff_grad as well
        g.backward(loss)
        ig = g.input_grads.get(name)
        if ig is None:
            continue
        idx = (0,) * ig.ndim
        num = finite_diff_grad(g, loss, name, idx, EPS)
        assert max_relative_error([ig[idx]], [num]) < tol


def _weighted(g, y, rng):
    """Random linear functional of ``y`` so every output element matters."""
    c = g.constant(rng.uniform(-1, 1, size=g.shape(y)))
    return g.sum(g.mul(y, c))


@pytest.mark.parametrize("op", ["add", "sub", "mul", "scale", "mean", "relu", "identity",
                                "reshape", "matmul", "linear", "l2_normalize"])
def test_primitive_gradients_elementwise_and_dense(op):
    rng = np.random.default_rng(1)
    g = graph64(1)
    a = g.param("a", (3, 4))
    b = g.param("b", (3, 4))
    g.store["a"] = away_from_zero(rng, (3, 4))
    g.store["b"] = away_from_zero(rng, (3, 4))
    if op == "add":
        y = g.add(a, b)
    elif op == "sub":
        y = g.sub(a, b)
    elif op == "mul":
        y = g.mul(a, b)
    elif op == "scale":
        y = g.scale(a, -2.5)
    elif op == "mean":
        y = g.mean(g.mul(a, b))
    elif op == "relu":
        y = g.relu(a)
    elif op == "identity":
        y = g.identity(a)
    elif op == "reshape":
        y = g.reshape(a, (2, 6))
    elif op == "matmul":
        c = g.param("c", (4, 5))
        y = g.matmul(a, c)
    elif op == "linear":
        w = g.param("w", (5, 4))
        bias = g.param("bias", (5,))
        y = g.linear(a, w, bias)
    else:
        y = g.l2_normalize(a)
    loss = y if g.shape(y) == () else _weighted(g, y, rng)
    g.forward()
    _check(g, loss)


def test_broadcast_add_gradient():
    rng = np.random.default_rng(2)
    g = graph64()
    a = g.param("a", (3, 4))
    b = g.param("b", (4,))
    loss = _weighted(g, g.mul(g.add(a, b), a), rng)
    g.forward()
    _check(g, loss)


@pytest.mark.parametrize("stride,padding,groups", [(1, 1, 1), (2, 1, 1), (1, 0, 2), (2, 2, 4)])
def test_conv2d_gradient(stride, padding, groups):
    rng = np.random.default_rng(3)
    g = graph64()
    x = g.input("x", (2, 4, 6, 6))
    w = g.param("w", (8, 4 // groups, 3, 3))
    y = g.conv2d(x, w, (stride, stride), (padding, padding), groups)
    loss = _weighted(g, y, rng)
    g.forward({"x": rng.uniform(-1, 1, size=(2, 4, 6, 6))})
    _check(g, loss)


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradient(training):
    rng = np.random.default_rng(4)
    g = graph64()
    x = g.input("x", (4, 3, 3, 3))
    gamma = g.param("gamma", (3,))
    beta = g.param("beta", (3,))
    y = g.batch_norm(x, gamma, beta, buffer="bn")
    loss = _weighted(g, y, rng)
    g.store.buffers["bn.mean"][:] = [0.1, -0.2, 0.3]
    g.store.buffers["bn.var"][:] = [0.5, 2.0, 1.0]
    g.forward({"x": rng.uniform(-1, 1, size=(4, 3, 3, 3))}, training=training, update_stats=False)
    _check(g, loss)


def test_batch_norm_1d_gradient():
    rng = np.random.default_rng(5)
    g = graph64()
    x = g.input("x", (6, 4))
    y = g.batch_norm(x, g.param("gamma", (4,)), g.param("beta", (4,)), buffer="bn")
    loss = _weighted(g, y, rng)
    g.forward({"x": rng.uniform(-1, 1, size=(6, 4))}, update_stats=False)
    _check(g, loss)


def test_max_pool_gradient():
    rng = np.random.default_rng(6)
    g = graph64()
    x = g.param("x", (2, 2, 7, 7))
    loss = _weighted(g, g.max_pool2d(x, 3, 2, 1), rng)
    # distinct values keep the winners away from ties
    g.store["x"] = rng.permutation(2 * 2 * 7 * 7).reshape(2, 2, 7, 7) / 50.0 - 1
    g.forward()
    _check(g, loss)


@pytest.mark.parametrize("size", [(3, 3), (8, 5), (5, 5)])
def test_bilinear_resize_gradient(size):
    rng = np.random.default_rng(7)
    g = graph64()
    x = g.input("x", (2, 3, 5, 5))
    w = g.param("w", (3, 3, 1, 1))
    loss = _weighted(g, g.bilinear_resize(g.conv2d(x, w), size), rng)
    g.forward({"x": rng.uniform(-1, 1, size=(2, 3, 5, 5))})
    _check(g, loss)


def test_gap_and_info_nce_gradient():
    rng = np.random.default_rng(8)
    g = graph64()
    x = g.input("x", (6, 3, 4, 4))
    w = g.param("w", (5, 3, 3, 3))
    z = g.l2_normalize(g.global_avg_pool(g.conv2d(x, w, padding=(1, 1))))
    loss = g.info_nce(z, tau=0.5)
    g.forward({"x": rng.uniform(-1, 1, size=(6, 3, 4, 4))})
    _check(g, loss)


def test_info_nce_gradient_wrt_projections():
    rng = np.random.default_rng(9)
    g = graph64()
    p = g.param("p", (8, 6))
    g.store["p"] = rng.normal(size=(8, 6))
    loss = g.info_nce(g.l2_normalize(p), tau=0.3)
    g.forward()
    _check(g, loss)


def test_gradient_linearity():
    rng = np.random.default_rng(10)
    g = graph64()
    x = g.input("x", (4, 3))
    w = g.param("w", (5, 3))
    h = g.relu(g.linear(x, w))
    l1 = _weighted(g, h, rng)
    l2 = g.sum(g.mul(h, h))
    a, b = 0.7, -1.3
    combo = g.add(g.scale(l1, a), g.scale(l2, b))
    g.forward({"x": rng.uniform(-1, 1, size=(4, 3))})
    g1, g2, gc = backward(g, l1)["w"], backward(g, l2)["w"], backward(g, combo)["w"]
    expect = a * g1 + b * g2
    assert max_relative_error(gc, expect, floor=1e-300) < 1e-10


def test_determinism_bit_identical():
    rng = np.random.default_rng(11)
    xv = rng.uniform(-1, 1, size=(4, 3, 5, 5))
    outs = []
    for _ in range(2):
        g = Graph(ParamStore(3, np.float32))
        x = g.input("x", xv.shape)
        w = g.param("w", (4, 3, 3, 3))
        y = g.batch_norm(g.conv2d(x, w, padding=(1, 1)), g.param("ga", (4,), kind="ones"),
                         g.param("be", (4,), kind="zeros"), buffer="bn")
        loss = g.mean(g.mul(y, y))
        vals = g.forward({"x": xv})
        outs.append((vals[y].copy(), backward(g, loss)["w"]))
    np.testing.assert_array_equal(outs[0][0], outs[1][0])
    np.testing.assert_array_equal(outs[0][1], outs[1][1])


def test_param_store_replicas_share_init_stream():
    s = ParamStore(5)
    s.declare("a.w", (3, 3), key="k")
    s.declare("u0/a.w", (3, 3), key="k")
    np.testing.assert_array_equal(s["a.w"], s["u0/a.w"])
    with pytest.raises(ShapeError):
        s.declare("a.w", (2, 2))
    bound = np.sqrt(6 / 3)
    assert np.all(np.abs(s["a.w"]) <= bound)


def test_zero_vector_normalization_is_reported():
    g = graph64()
    x = g.input("x", (2, 3))
    g.l2_normalize(x)
    with pytest.raises(FloatingPointError):
        g.forward({"x": np.zeros((2, 3))})
