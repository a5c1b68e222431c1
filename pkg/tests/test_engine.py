import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynroi import engine as E
from dynroi import gradcheck
from dynroi.roi import CropWindow


def T(a, grad=False):
    return E.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def img(a):
    return T(np.asarray(a, dtype=np.float64)[None])


def direct_conv(x, w, b):
    """Brute-force same-padded cross-correlation."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    p = k // 2
    xp = np.zeros((c_in, h + 2 * p, wd + 2 * p))
    xp[:, p:p + h, p:p + wd] = x
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                out[o, i, j] = b[o] + sum(
                    xp[c, i + u, j + v] * w[o, c, u, v]
                    for c in range(c_in) for u in range(k) for v in range(k))
    return out


# --------------------------------------------------------------- conv2d


def test_conv_scalar_kernel_scales():
    out = E.conv2d(img([[1, 2], [3, 4]]), T(np.full((1, 1, 1, 1), 2.0)), T([0.0]))
    np.testing.assert_array_equal(out.data[0], [[2, 4], [6, 8]])


def test_conv_ones_kernel_same_padding():
    out = E.conv2d(img([[1, 2], [3, 4]]), T(np.ones((1, 1, 3, 3))), T([0.0]))
    np.testing.assert_array_equal(out.data[0], [[10, 10], [10, 10]])


def test_conv_zero_input_gives_bias():
    rng = np.random.default_rng(0)
    out = E.conv2d(T(np.zeros((2, 5, 4))), T(rng.normal(size=(3, 2, 3, 3))), T([0.5, -1.0, 2.0]))
    for o, b in enumerate([0.5, -1.0, 2.0]):
        assert np.all(out.data[o] == b)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_direct_oracle(k):
    rng = np.random.default_rng(k)
    x, w, b = rng.normal(size=(2, 5, 6)), rng.normal(size=(3, 2, k, k)), rng.normal(size=3)
    out = E.conv2d(T(x), T(w), T(b))
    np.testing.assert_allclose(out.data, direct_conv(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch_names_dimension():
    with pytest.raises(E.ShapeError, match="channel"):
        E.conv2d(T(np.zeros((2, 4, 4))), T(np.zeros((1, 3, 3, 3))), T([0.0]))


# ---------------------------------------------------------- activations


def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(E.activation(T([-1.0, 0.0, 2.0]), "relu").data, [0, 0, 2])
    assert E.activation(T([0.0]), "sigmoid").data[0] == 0.5
    assert E.sigmoid(T([math.log(3)])).data[0] == pytest.approx(0.75, abs=1e-15)


def test_softmax_examples():
    x = np.zeros((3, 1, 2))
    x[0, 0, 1] = math.log(2)
    out = E.softmax_channels(T(x)).data
    np.testing.assert_allclose(out[:, 0, 0], [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(out[:, 0, 1], [0.5, 0.25, 0.25], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 4), st.integers(1, 5), st.floats(-50, 50), st.integers(0, 2**31))
def test_softmax_sums_to_one_and_is_shift_invariant(c, hw, shift, seed):
    x = np.random.default_rng(seed).normal(scale=10, size=(c, hw, hw)).astype(np.float32)
    y = E.softmax_channels(E.Tensor(x)).data
    assert np.all(np.abs(y.sum(axis=0) - 1) <= 1e-6)
    y2 = E.softmax_channels(E.Tensor(x.astype(np.float64) + shift)).data
    np.testing.assert_allclose(y2, E.softmax_channels(T(x)).data, atol=1e-12)


# ------------------------------------------------------ pool / upsample


def test_maxpool_examples():
    assert E.maxpool2(img([[1, 2], [3, 4]])).data.tolist() == [[[4.0]]]
    np.testing.assert_array_equal(E.maxpool2(T(np.full((2, 4, 6), 3.5))).data, np.full((2, 2, 3), 3.5))


def test_maxpool_gradient_is_argmax_indicator():
    x = T(np.array([[[1, 5, 2, 2], [3, 0, 2, 2]]], dtype=np.float64), grad=True)
    E.backward(E.sum_(E.maxpool2(x)))
    # the second window ties; first in row-major order wins
    np.testing.assert_array_equal(x.grad[0], [[0, 1, 1, 0], [0, 0, 0, 0]])


def test_maxpool_odd_size_rejected():
    with pytest.raises(E.ShapeError):
        E.maxpool2(T(np.zeros((1, 3, 4))))


def test_upsample_examples():
    out = E.upsample2(img([[1, 2], [3, 4]])).data[0]
    np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    x = T(np.random.default_rng(0).normal(size=(2, 3, 3)), grad=True)
    E.backward(E.sum_(E.upsample2(x)))
    np.testing.assert_array_equal(x.grad, np.full((2, 3, 3), 4.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_upsample_then_pool_is_identity_for_nonnegative(seed):
    x = np.abs(np.random.default_rng(seed).normal(size=(2, 3, 5)))
    np.testing.assert_array_equal(E.maxpool2(E.upsample2(T(x))).data, x)


# ----------------------------------------------- concat / crop / pad


def test_concat_order_and_round_trip():
    a, b = np.ones((1, 2, 2)), np.full((1, 2, 2), 2.0)
    out = E.concat_channels(T(a), T(b)).data
    assert out.shape == (2, 2, 2)
    np.testing.assert_array_equal(out[:1], a)
    np.testing.assert_array_equal(out[1:], b)


def test_concat_spatial_mismatch():
    with pytest.raises(E.ShapeError, match="spatial"):
        E.concat_channels(T(np.zeros((1, 2, 2))), T(np.zeros((1, 2, 3))))


def test_crop_examples():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    np.testing.assert_array_equal(E.crop_spatial(T(x), CropWindow(1, 1, 2, 2)).data[0], [[5, 6], [9, 10]])
    np.testing.assert_array_equal(E.crop_spatial(T(x), CropWindow(0, 0, 4, 4)).data, x)


def test_crop_backward_scatters_into_window():
    x = T(np.zeros((1, 4, 4)), grad=True)
    g = np.array([[1.0, 2.0], [3.0, 4.0]])
    E.backward(E.sum_(E.mul(E.crop_spatial(x, CropWindow(2, 1, 2, 2)), T(g[None]))))
    expected = np.zeros((4, 4))
    expected[2:4, 1:3] = g
    np.testing.assert_array_equal(x.grad[0], expected)


def test_crop_window_outside_frame_rejected():
    with pytest.raises(E.ShapeError):
        E.crop_spatial(T(np.zeros((1, 4, 4))), CropWindow(3, 0, 2, 2))


def test_pad_examples():
    out = E.pad_to_frame(T(np.ones((1, 2, 2))), CropWindow(1, 1, 2, 2), (4, 4)).data[0]
    expected = np.zeros((4, 4))
    expected[1:3, 1:3] = 1
    np.testing.assert_array_equal(out, expected)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_crop_pad_round_trip_and_mass(h, w, data):
    hh, ww = data.draw(st.integers(1, h)), data.draw(st.integers(1, w))
    win = CropWindow(data.draw(st.integers(0, h - hh)), data.draw(st.integers(0, w - ww)), hh, ww)
    x = np.random.default_rng(h * 7 + w).normal(size=(2, h, w))
    padded = E.pad_to_frame(E.crop_spatial(T(x), win), win, (h, w)).data
    rs, cs = win.slices()
    np.testing.assert_array_equal(padded[:, rs, cs], x[:, rs, cs])
    assert padded.sum() == pytest.approx(x[:, rs, cs].sum(), abs=1e-12)


# -------------------------------------------------------------- backward


def test_backward_quadratic():
    w = T([1.0, 2.0], grad=True)
    E.backward(E.sum_(E.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_constant_loss_gives_zero_grads():
    w = T([1.0, 2.0], grad=True)
    E.backward(E.add(E.sum_(E.scale(w, 0.0)), T(3.0)))
    np.testing.assert_array_equal(w.grad, [0.0, 0.0])


def test_tape_replay_gives_identical_gradients():
    rng = np.random.default_rng(1)
    x = T(rng.normal(size=(2, 6, 6)))
    w, b = T(rng.normal(size=(3, 2, 3, 3)), grad=True), T(rng.normal(size=3), grad=True)
    loss = E.sum_(E.sigmoid(E.maxpool2(E.relu(E.conv2d(x, w, b)))))
    E.backward(loss)
    first = (w.grad.copy(), b.grad.copy())
    E.zero_grad([w, b])
    E.backward(loss)
    np.testing.assert_array_equal(w.grad, first[0])
    np.testing.assert_array_equal(b.grad, first[1])


def test_no_grad_records_nothing():
    w = T([1.0], grad=True)
    with E.no_grad():
        y = E.mul(w, w)
    assert y.node is None


def test_forward_is_deterministic():
    rng = np.random.default_rng(2)
    shapes = E.block_shapes("b", E.ConvBlockConfig(3, 8, convs_per_block=2))
    params = E.init_params(shapes, rng)
    x = E.Tensor(rng.normal(size=(3, 8, 8)).astype(np.float32))
    a = E.conv_block(params, "b", x, 2).data
    b = E.conv_block(params, "b", x, 2).data
    assert a.tobytes() == b.tobytes()


def test_init_params_he_uniform_and_zero_bias():
    params = E.init_params(E.conv_shapes("c", 4, 8, 3), np.random.default_rng(0))
    bound = math.sqrt(6 / (4 * 9))
    assert np.all(np.abs(params["c.w"].data) <= bound)
    assert np.all(params["c.b"].data == 0)


# ------------------------------------------------------------ param_count


def test_param_count_examples():
    assert E.param_count(E.conv_shapes("a", 3, 8, 3)) == 224
    assert E.param_count(E.block_shapes("b", E.ConvBlockConfig(3, 8, convs_per_block=2))) == 808
    assert E.param_count({}) == 0


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        E.ConvBlockConfig(3, 8, kernel=2)


# -------------------------------------------------------- gradient checks


def test_every_op_has_a_gradient_case():
    assert set(gradcheck.OP_CASES) == set(E.DIFFERENTIABLE_OPS)


@pytest.mark.parametrize("name", sorted(gradcheck.OP_CASES))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(sorted(gradcheck.OP_CASES).index(name))
    for _ in range(20):
        assert gradcheck.check(*gradcheck.OP_CASES[name](rng), rng) < gradcheck.TOLERANCE


def test_pipeline_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    err = gradcheck.check(*gradcheck.COMPOSITE_CASES["pipeline(conv-relu-pool-dice)"](rng), rng)
    assert err < gradcheck.TOLERANCE


def test_sign_bug_in_conv_backward_is_detected(monkeypatch):
    original = E._conv2d_backward

    def flipped(*args):
        gx, gw, gb = original(*args)
        return gx, -gw, gb

    monkeypatch.setattr(E, "_conv2d_backward", flipped)
    rng = np.random.default_rng(0)
    assert gradcheck.check(*gradcheck.OP_CASES["conv2d"](rng), rng) > gradcheck.TOLERANCE
