import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _oracles import direct_conv, loop_avg_pool, loop_global_max, numeric_grad, rel_err
from tcnn.layers import (
    LRN,
    Concat,
    Conv2D,
    Dropout,
    Energy,
    Flatten,
    FullyConnected,
    MaxPool,
    ReLU,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    conv2d_reference,
    energy_backward,
    energy_forward,
    fc_backward,
    fc_forward,
    lrn_backward,
    lrn_forward,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
    softmax,
    softmax_xent,
)
from tcnn.tensor import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


# --- convolution -----------------------------------------------------------


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 4))
    y, _ = conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(y, x)


def test_conv_alexnet_c1_shape():
    layer = Conv2D(3, 96, 11, stride=4, allocate=False)
    assert layer.output_shape([(1, 3, 227, 227)]) == (1, 96, 55, 55)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_direct_loops(rng, stride, pad):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    y, _ = conv2d_forward(x, w, b, stride, pad)
    assert np.max(np.abs(y - direct_conv(x, w, b, stride, pad))) < 1e-12


def test_grouped_conv_matches_per_group_loops(rng):
    x = rng.standard_normal((2, 4, 6, 6))
    w = rng.standard_normal((6, 2, 3, 3))
    b = rng.standard_normal(6)
    y, _ = conv2d_forward(x, w, b, 1, 1, groups=2)
    ref = np.concatenate(
        [direct_conv(x[:, :2], w[:3], b[:3], 1, 1), direct_conv(x[:, 2:], w[3:], b[3:], 1, 1)], axis=1
    )
    assert np.max(np.abs(y - ref)) < 1e-12
    assert np.max(np.abs(conv2d_reference(x, w, b, 1, 1, 2) - ref)) < 1e-12


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 3, 4, 4)), np.zeros((2, 2, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 2, 2, 2)), np.zeros((2, 2, 3, 3)), np.zeros(2))


def test_conv_backward_zero_grad(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    _, cache = conv2d_forward(x, rng.standard_normal((3, 2, 3, 3)), np.zeros(3))
    for g in conv2d_backward(cache, np.zeros((1, 3, 4, 4))):
        assert not g.any()


def test_conv_bias_grad_is_sum(rng):
    x = rng.standard_normal((2, 2, 6, 6))
    _, cache = conv2d_forward(x, rng.standard_normal((3, 2, 3, 3)), np.zeros(3), 1, 1)
    g = rng.standard_normal((2, 3, 6, 6))
    _, _, gb = conv2d_backward(cache, g)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)), rtol=1e-14)


@pytest.mark.parametrize("stride,pad,groups", [(1, 0, 1), (2, 1, 1), (1, 1, 2)])
def test_conv_finite_differences(rng, stride, pad, groups):
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((2, 2 // groups, 3, 3))
    b = rng.standard_normal(2)
    y, cache = conv2d_forward(x, w, b, stride, pad, groups)
    r = rng.standard_normal(y.shape)

    def f():
        return float((conv2d_forward(x, w, b, stride, pad, groups)[0] * r).sum())

    gx, gw, gb = conv2d_backward(cache, r)
    assert rel_err(gx, numeric_grad(f, x)) < 1e-6
    assert rel_err(gw, numeric_grad(f, w)) < 1e-6
    assert rel_err(gb, numeric_grad(f, b)) < 1e-6


# --- relu ------------------------------------------------------------------


def test_relu_examples():
    x = np.array([-1.0, 0.0, 2.0]).reshape(1, 3, 1, 1)
    assert relu_forward(x).ravel().tolist() == [0, 0, 2]
    assert relu_backward(x, np.full_like(x, 5.0)).ravel().tolist() == [0, 0, 5]


@given(arrays(np.float64, (2, 3, 2, 2), elements=st.floats(-1e6, 1e6)))
def test_relu_idempotent(x):
    np.testing.assert_array_equal(relu_forward(relu_forward(x)), relu_forward(x))


# --- lrn -------------------------------------------------------------------


def test_lrn_zero_input():
    assert not lrn_forward(np.zeros((1, 7, 2, 2)))[0].any()


def test_lrn_single_channel_value():
    x = np.zeros((1, 5, 1, 1))
    x[0, 2] = 1.0
    y, _ = lrn_forward(x, 5, 2.0, 1e-4, 0.75)
    assert y[0, 2, 0, 0] == pytest.approx(1 / 2.00002**0.75, rel=1e-12)
    assert y[0, 2, 0, 0] == pytest.approx(0.59460, abs=5e-6)


def test_lrn_matches_channel_loop(rng):
    x = rng.standard_normal((2, 9, 3, 2)) * 30
    y, _ = lrn_forward(x, 5, 2.0, 1e-4, 0.75)
    ref = np.empty_like(x)
    for c in range(9):
        lo, hi = max(0, c - 2), min(9, c + 3)
        ref[:, c] = x[:, c] / (2.0 + 1e-4 / 5 * (x[:, lo:hi] ** 2).sum(axis=1)) ** 0.75
    np.testing.assert_allclose(y, ref, rtol=1e-13)


def test_lrn_finite_differences(rng):
    # large activations so the normalisation term matters
    x = rng.standard_normal((1, 8, 2, 2)) * 50
    r = rng.standard_normal(x.shape)
    y, scale = lrn_forward(x)

    def f():
        return float((lrn_forward(x)[0] * r).sum())

    assert rel_err(lrn_backward(x, scale, r), numeric_grad(f, x)) < 1e-6


@given(arrays(np.float64, (1, 6, 2, 2), elements=st.floats(-1e4, 1e4)))
def test_lrn_shrinks_magnitude(x):
    y, _ = lrn_forward(x, 5, 2.0, 1e-4, 0.75)
    assert y.shape == x.shape
    assert np.all(np.abs(y) <= np.abs(x))


# --- max pooling -----------------------------------------------------------


def test_maxpool_example():
    x = np.array([[1.0, 3.0], [0.0, 4.0]]).reshape(1, 1, 2, 2)
    y, _ = maxpool_forward(x, 2, 2)
    assert y.ravel().tolist() == [4.0]


def test_maxpool_ties_route_to_first_index():
    x = np.full((1, 1, 4, 4), 2.0)
    y, arg = maxpool_forward(x, 2, 2)
    np.testing.assert_array_equal(y, np.full((1, 1, 2, 2), 2.0))
    gx = maxpool_backward(x.shape, arg, 2, 2, np.ones((1, 1, 2, 2)))
    expect = np.zeros((4, 4))
    expect[::2, ::2] = 1.0
    np.testing.assert_array_equal(gx[0, 0], expect)


def test_maxpool_alexnet_shape():
    assert MaxPool(3, 2).output_shape([(1, 96, 55, 55)]) == (1, 96, 27, 27)


def test_maxpool_finite_differences(rng):
    x = rng.standard_normal((2, 3, 7, 7))
    r = rng.standard_normal((2, 3, 3, 3))
    _, arg = maxpool_forward(x, 3, 2)

    def f():
        return float((maxpool_forward(x, 3, 2)[0] * r).sum())

    assert rel_err(maxpool_backward(x.shape, arg, 3, 2, r), numeric_grad(f, x)) < 1e-8


# --- energy ----------------------------------------------------------------


def test_energy_examples():
    x = np.array([[1.0, 3.0], [0.0, 4.0]]).reshape(1, 1, 2, 2)
    assert energy_forward(x, "average")[0].item() == 2.0
    y, arg = energy_forward(x, "max")
    assert y.item() == 4.0
    g = energy_backward(x.shape, np.ones((1, 1, 1, 1)), "max", arg)
    np.testing.assert_array_equal(g[0, 0], [[0, 0], [0, 1]])
    g = energy_backward(x.shape, np.ones((1, 1, 1, 1)), "average")
    np.testing.assert_array_equal(g[0, 0], np.full((2, 2), 0.25))


def test_energy_average_equals_avg_pool_oracle(rng):
    for h in range(1, 6):
        for w in range(1, 6):
            x = rng.standard_normal((2, 3, h, w))
            y, _ = energy_forward(x, "average")
            assert np.max(np.abs(y - loop_avg_pool(x, h, w))) < 1e-12


@pytest.mark.parametrize("mode", ["average", "max"])
def test_energy_finite_differences(rng, mode):
    x = rng.standard_normal((2, 3, 4, 5))
    r = rng.standard_normal((2, 3, 1, 1))
    _, arg = energy_forward(x, mode)

    def f():
        return float((energy_forward(x, mode)[0] * r).sum())

    assert rel_err(energy_backward(x.shape, r, mode, arg), numeric_grad(f, x)) < 1e-8


@settings(max_examples=60)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31), st.sampled_from(["average", "max"]))
def test_energy_orderless(h, w, seed, mode):
    g = make_rng(seed)
    x = g.standard_normal((2, 3, h, w))
    perm = g.permutation(h * w)
    xs = x.reshape(2, 3, h * w)[:, :, perm].reshape(2, 3, h, w)
    a, _ = energy_forward(x, mode)
    b, _ = energy_forward(xs, mode)
    assert a.shape == (2, 3, 1, 1)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


@given(arrays(np.float64, (1, 2, 3, 4), elements=st.floats(-1e3, 1e3)))
def test_energy_of_rectified_maps_is_nonnegative(x):
    e, _ = energy_forward(relu_forward(x), "average")
    np.testing.assert_array_equal(relu_forward(e), e)


def test_energy_oracle_against_loops(rng):
    x = rng.standard_normal((1, 4, 7, 3))
    assert np.max(np.abs(energy_forward(x, "max")[0] - loop_global_max(x))) == 0.0


# --- flatten / concat ------------------------------------------------------


def test_flatten_and_concat_shapes(rng):
    ctx = {}
    y = Flatten().forward([rng.standard_normal((1, 256, 6, 6))], ctx)
    assert y.shape == (1, 9216, 1, 1)
    cat = Concat()
    a, b = rng.standard_normal((1, 384, 1, 1)), rng.standard_normal((1, 9216, 1, 1))
    cctx = {}
    z = cat.forward([a, b], cctx)
    assert z.shape == (1, 9600, 1, 1)
    np.testing.assert_array_equal(z[:, :384], a)
    ga, gb = cat.backward(z * 2, cctx)[0]
    np.testing.assert_array_equal(ga, 2 * a)
    np.testing.assert_array_equal(gb, 2 * b)
    gflat = Flatten().backward(y, ctx)[0][0]
    assert gflat.shape == (1, 256, 6, 6)


def test_concat_rejects_spatial_inputs():
    with pytest.raises(ShapeError):
        Concat().output_shape([(1, 3, 2, 2), (1, 3, 1, 1)])


# --- fully connected -------------------------------------------------------


def test_fc_examples():
    x = np.array([4.0, 5.0]).reshape(1, 2, 1, 1)
    assert fc_forward(x, np.array([[1.0, 2.0]]), np.array([3.0])).ravel().tolist() == [17.0]
    np.testing.assert_array_equal(fc_forward(x, np.eye(2), np.zeros(2)), x)


def test_fc_param_count():
    assert FullyConnected(384, 4096, allocate=False).param_count() == 384 * 4096 + 4096


def test_fc_finite_differences(rng):
    x = rng.standard_normal((3, 5, 1, 1))
    w = rng.standard_normal((4, 5))
    b = rng.standard_normal(4)
    r = rng.standard_normal((3, 4, 1, 1))

    def f():
        return float((fc_forward(x, w, b) * r).sum())

    gx, gw, gb = fc_backward(x, w, r)
    for a, t in ((gx, x), (gw, w), (gb, b)):
        assert rel_err(a, numeric_grad(f, t)) < 1e-8


# --- dropout ---------------------------------------------------------------


def test_dropout_inference_is_identity(rng):
    x = rng.standard_normal((2, 10, 1, 1))
    for rate in (0.0, 0.3, 0.9):
        assert Dropout(rate).forward([x], {}, train=False) is x
    np.testing.assert_array_equal(Dropout(0.0).forward([x], {}, train=True, rng=rng), x)


def test_dropout_unbiased(rng):
    x = np.ones((1, 10**6, 1, 1))
    y = Dropout(0.5).forward([x], {}, train=True, rng=rng)
    assert abs(y.mean() - 1.0) < 0.01
    assert set(np.unique(y)) <= {0.0, 2.0}


def test_dropout_frozen_mask_and_grad(rng):
    layer = Dropout(0.5)
    x = rng.standard_normal((2, 8, 1, 1))
    ctx = {}
    y1 = layer.forward([x], ctx, train=True, rng=rng)
    y2 = layer.forward([x], ctx, train=True, rng=rng)
    np.testing.assert_array_equal(y1, y2)
    g = layer.backward(np.ones_like(x), ctx)[0][0]
    np.testing.assert_array_equal(g, ctx["mask"])


def test_dropout_rate_validated():
    with pytest.raises(ValueError):
        Dropout(1.0)


# --- softmax cross-entropy -------------------------------------------------


def test_xent_symmetric_case():
    loss, _ = softmax_xent(np.zeros((1, 2, 1, 1)), [0])
    assert loss == pytest.approx(0.693147, abs=1e-6)
    np.testing.assert_allclose(softmax(np.zeros((1, 2, 1, 1))), [[0.5, 0.5]])


def test_xent_stable_for_large_logits():
    z = np.array([1000.0, 0.0]).reshape(1, 2, 1, 1)
    p = softmax(z)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [[1.0, 0.0]], atol=1e-300)
    loss, g = softmax_xent(z, [0])
    assert np.isfinite(loss) and np.all(np.isfinite(g))


def test_xent_finite_differences(rng):
    z = rng.standard_normal((3, 4, 1, 1))
    y = [1, 3, 0]
    _, g = softmax_xent(z, y)
    assert rel_err(g, numeric_grad(lambda: softmax_xent(z, y)[0], z)) < 1e-8


def test_xent_label_range():
    with pytest.raises(ValueError):
        softmax_xent(np.zeros((1, 3, 1, 1)), [3])


# --- layer objects through the common interface ----------------------------


@pytest.mark.parametrize(
    "layer,shape",
    [
        (Conv2D(2, 4, 3, stride=1, pad=1, groups=2), (2, 2, 5, 5)),
        (ReLU(), (2, 3, 4, 4)),
        (LRN(), (2, 6, 3, 3)),
        (MaxPool(3, 2), (2, 2, 7, 7)),
        (Energy("average"), (2, 3, 4, 5)),
        (Energy("max"), (2, 3, 4, 5)),
        (Flatten(), (2, 2, 3, 3)),
        (FullyConnected(6, 3), (2, 6, 1, 1)),
        (Dropout(0.5), (2, 6, 1, 1)),
    ],
)
def test_layer_objects_gradcheck(rng, layer, shape):
    """Every layer's backward agrees with central differences (dropout mask frozen)."""
    for k, v in layer.params.items():
        v[...] = rng.standard_normal(v.shape)
    x = rng.standard_normal(shape) + 0.05  # keep ReLU inputs away from the kink
    ctx = {}
    y = layer.forward([x], ctx, train=True, rng=rng)
    assert y.shape == layer.output_shape([shape])
    r = rng.standard_normal(y.shape)

    def f():
        return float((layer.forward([x], dict(mask=ctx.get("mask")), train=True, rng=rng) * r).sum())

    (gx,), gp = layer.backward(r, ctx)
    assert rel_err(gx, numeric_grad(f, x), floor=1e-8) < 1e-4
    for k, v in layer.params.items():
        assert rel_err(gp[k], numeric_grad(f, v), floor=1e-8) < 1e-4
