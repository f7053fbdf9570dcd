import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import check_gradients, conv_loop, fc_loop
from pidcnn import tensor as tc
from pidcnn.tensor import (
    AdamConfig,
    ParameterStore,
    RunningStats,
    ShapeError,
    Value,
    adam_step,
    avg_pool2,
    backward,
    batch_norm,
    concat_channels,
    conv_ct33,
    fully_connected,
    max_pool2,
    mse_loss,
    prelu,
    prelu_inverse,
    relu,
)


def rnd(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


# --- conv_ct33 ---------------------------------------------------------------


def test_conv_delta_kernel_is_identity():
    x = rnd(0, 1, 1, 2, 5, 6).astype(np.float32)
    w = np.zeros((1, 1, 1, 3, 3), np.float32)
    w[0, 0, 0, 1, 1] = 1
    out = conv_ct33(Value(x), Value(w), Value(np.zeros(1, np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_zero_weight_gives_bias():
    x = rnd(1, 2, 3, 1, 4, 4)
    out = conv_ct33(Value(x), Value(np.zeros((5, 3, 1, 3, 3))), Value(np.full(5, 0.75)))
    assert out.shape == (2, 5, 1, 4, 4)
    assert np.all(out.data == 0.75)


def test_conv_matches_loop_oracle():
    x = rnd(2, 1, 2, 3, 8, 8)
    w = rnd(3, 4, 2, 1, 3, 3)
    b = rnd(4, 4)
    out = conv_ct33(Value(x), Value(w), Value(b)).data
    ref = conv_loop(x, w, b)
    assert np.max(np.abs(out - ref) / np.maximum(np.abs(ref), 1e-12)) < 1e-5


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError, match="input channels 2"):
        conv_ct33(Value(rnd(0, 1, 2, 1, 4, 4)), Value(rnd(0, 3, 3, 1, 3, 3)), Value(rnd(0, 3)))


def test_conv_gradients():
    x, w, b = rnd(5, 2, 2, 2, 4, 5), rnd(6, 3, 2, 1, 3, 3), rnd(7, 3)
    r = rnd(8, 2, 3, 2, 4, 5)
    err = check_gradients(lambda v: tc.total(conv_ct33(*v) * Value(r)), [x, w, b])
    assert err < 1e-4


def test_conv_float32_preserved():
    x = Value(rnd(0, 1, 2, 1, 4, 4).astype(np.float32))
    w = Value(rnd(0, 2, 2, 1, 3, 3).astype(np.float32))
    out = conv_ct33(x, w, Value(np.zeros(2, np.float32)))
    assert out.dtype == np.float32


# --- batch_norm --------------------------------------------------------------


def test_batch_norm_train_standardizes():
    x = Value(rnd(9, 4, 3, 2, 5, 5) * 3 + 7)
    rs = RunningStats.initial(3, np.float64)
    y = batch_norm(x, Value(np.ones(3)), Value(np.zeros(3)), rs, train=True).data
    axes = (0, 2, 3, 4)
    np.testing.assert_allclose(y.mean(axis=axes), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=axes), 1, atol=1e-5)


def test_batch_norm_affine_on_standardized_input():
    raw = rnd(10, 4, 2, 1, 6, 6)
    axes = (0, 2, 3, 4)
    std = (raw - raw.mean(axis=axes, keepdims=True)) / raw.std(axis=axes, keepdims=True)
    rs = RunningStats.initial(2, np.float64)
    y = batch_norm(Value(std), Value(np.full(2, 2.0)), Value(np.full(2, 3.0)), rs).data
    np.testing.assert_allclose(y.mean(axis=axes), 3, atol=1e-5)
    np.testing.assert_allclose(y.std(axis=axes), 2, atol=1e-4)


def test_batch_norm_running_stats_update():
    x = rnd(11, 8, 2, 1, 4, 4) + 5
    rs = RunningStats.initial(2, np.float64)
    batch_norm(Value(x), Value(np.ones(2)), Value(np.zeros(2)), rs, train=True)
    mean = x.mean(axis=(0, 2, 3, 4))
    var = x.var(axis=(0, 2, 3, 4), ddof=1)
    np.testing.assert_allclose(rs.mean, 0.1 * mean)
    np.testing.assert_allclose(rs.var, 0.9 + 0.1 * var)


def test_batch_norm_eval_uses_running_stats():
    rs = RunningStats(np.array([1.0, -2.0]), np.array([4.0, 9.0]))
    x = rnd(12, 2, 2, 1, 3, 3)
    y = batch_norm(Value(x), Value(np.ones(2)), Value(np.zeros(2)), rs, train=False).data
    ref = (x - rs.mean[None, :, None, None, None]) / np.sqrt(rs.var[None, :, None, None, None] + 1e-5)
    np.testing.assert_allclose(y, ref)


def test_batch_norm_eval_without_stats_errors():
    with pytest.raises(RuntimeError, match="initialize"):
        batch_norm(Value(rnd(0, 2, 1, 1, 2, 2)), Value(np.ones(1)), Value(np.zeros(1)),
                   RunningStats(), train=False)


@pytest.mark.parametrize("train", [True, False])
def test_batch_norm_gradients(train):
    x, g, b = rnd(13, 2, 3, 1, 4, 4), rnd(14, 3) + 1, rnd(15, 3)
    r = rnd(16, 2, 3, 1, 4, 4)

    def build(v):
        rs = RunningStats(np.array([0.1, -0.2, 0.3]), np.array([1.5, 0.5, 2.0]))
        return tc.total(batch_norm(*v, rs, train=train) * Value(r))

    assert check_gradients(build, [x, g, b]) < 1e-4


# --- nonlinearities ----------------------------------------------------------


def test_prelu_compresses_negative_space():
    y = prelu(Value(np.array([[-5.0, 7.0]]).T), Value(np.array([0.2])))
    np.testing.assert_allclose(y.data.ravel(), [-1.0, 7.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(0.01, 5.0))
@settings(max_examples=60, deadline=None)
def test_prelu_inverse_roundtrip(xs, alpha):
    x = np.array(xs)[:, None]
    y = prelu(Value(x), Value(np.array([alpha]))).data
    np.testing.assert_allclose(prelu_inverse(y, [alpha]), x, atol=1e-6, rtol=1e-12)


def avoid_kink(a, margin=1e-3):
    return np.where(np.abs(a) < margin, np.sign(a + 1e-12) * (margin + np.abs(a)), a)


def test_prelu_gradients():
    x = avoid_kink(rnd(17, 2, 3, 2, 3, 3))
    alpha = np.array([0.2, 0.25, -0.1])
    r = rnd(18, 2, 3, 2, 3, 3)
    assert check_gradients(lambda v: tc.total(prelu(*v) * Value(r)), [x, alpha]) < 1e-4


def test_relu_values_and_gradients():
    np.testing.assert_array_equal(relu(Value(np.array([-3.0, 4.0, 0.0]))).data, [0, 4, 0])
    x = avoid_kink(rnd(19, 3, 4))
    r = rnd(20, 3, 4)
    assert check_gradients(lambda v: tc.total(relu(v[0]) * Value(r)), [x]) < 1e-4


# --- pooling -----------------------------------------------------------------


def test_avg_pool_constant_and_window():
    c = avg_pool2(Value(np.full((1, 2, 1, 4, 4), 3.5)))
    assert c.shape == (1, 2, 1, 2, 2) and np.all(c.data == 3.5)
    block = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2)
    assert avg_pool2(Value(block)).data.item() == 2.5
    assert max_pool2(Value(block)).data.item() == 4.0


def test_avg_pool_equals_strided_quarter_conv():
    x = rnd(21, 2, 3, 2, 6, 8)
    ref = np.zeros((2, 3, 2, 3, 4))
    for i in range(3):
        for j in range(4):
            ref[..., i, j] = 0.25 * x[..., 2 * i:2 * i + 2, 2 * j:2 * j + 2].sum(axis=(-1, -2))
    np.testing.assert_allclose(avg_pool2(Value(x)).data, ref, atol=1e-6)


def test_pool_rejects_odd():
    with pytest.raises(ShapeError):
        avg_pool2(Value(np.zeros((1, 1, 1, 3, 4))))
    with pytest.raises(ShapeError):
        max_pool2(Value(np.zeros((1, 1, 1, 4, 5))))


def test_max_pool_tie_goes_to_first():
    x = Value(np.full((1, 1, 1, 2, 2), 2.0), requires_grad=True)
    backward(tc.total(max_pool2(x)))
    np.testing.assert_array_equal(x.grad.reshape(2, 2), [[1, 0], [0, 0]])


def test_pool_gradients():
    x = rnd(22, 2, 2, 2, 4, 6)
    r = rnd(23, 2, 2, 2, 2, 3)
    assert check_gradients(lambda v: tc.total(avg_pool2(v[0]) * Value(r)), [x]) < 1e-4
    assert check_gradients(lambda v: tc.total(max_pool2(v[0]) * Value(r)), [x]) < 1e-4


def test_max_pool_gradient_one_element_per_window():
    x = Value(rnd(24, 1, 1, 1, 4, 4), requires_grad=True)
    backward(tc.total(max_pool2(x)))
    g = x.grad.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(4, 4)
    assert np.all((g != 0).sum(axis=1) == 1)


# --- concat / fc / mse -------------------------------------------------------


def test_concat_channels_layout_and_roundtrip():
    a, b = rnd(25, 1, 2, 3, 4, 4), rnd(26, 1, 2, 3, 4, 4)
    c = concat_channels(Value(a), Value(b)).data
    assert c.shape == (1, 4, 3, 4, 4)
    np.testing.assert_array_equal(c[:, 2], b[:, 0])
    np.testing.assert_array_equal(c[:, :2], a)
    np.testing.assert_array_equal(c[:, 2:], b)


def test_concat_rejects_extent_mismatch():
    with pytest.raises(ShapeError):
        concat_channels(Value(np.zeros((1, 2, 3, 4, 4))), Value(np.zeros((1, 2, 3, 2, 2))))


def test_concat_gradients():
    a, b = rnd(27, 1, 2, 2, 2, 2), rnd(28, 1, 3, 2, 2, 2)
    r = rnd(29, 1, 5, 2, 2, 2)
    assert check_gradients(lambda v: tc.total(concat_channels(*v) * Value(r)), [a, b]) < 1e-4


def test_fully_connected_cases():
    x = rnd(30, 4, 3)
    eye = fully_connected(Value(x), Value(np.eye(3)), Value(np.zeros(3))).data
    np.testing.assert_array_equal(eye, x)
    b = np.array([1.0, -2.0])
    np.testing.assert_array_equal(
        fully_connected(Value(x), Value(np.zeros((3, 2))), Value(b)).data, np.tile(b, (4, 1)))
    w, bb = rnd(31, 3, 5), rnd(32, 5)
    out = fully_connected(Value(x), Value(w), Value(bb)).data
    ref = fc_loop(x, w, bb)
    assert np.max(np.abs(out - ref) / np.maximum(np.abs(ref), 1e-12)) < 1e-5
    with pytest.raises(ShapeError):
        fully_connected(Value(x), Value(np.zeros((4, 2))), Value(np.zeros(2)))


def test_fully_connected_gradients():
    x, w, b = rnd(33, 4, 3), rnd(34, 3, 5), rnd(35, 5)
    r = rnd(36, 4, 5)
    assert check_gradients(lambda v: tc.total(fully_connected(*v) * Value(r)), [x, w, b]) < 1e-4


def test_mse_loss_values_and_gradient():
    p = rnd(37, 3, 4)
    assert mse_loss(Value(p), p).data == 0
    assert mse_loss(Value(p), p - 1).data == pytest.approx(1.0)
    t = rnd(38, 3, 4)
    assert check_gradients(lambda v: mse_loss(v[0], t), [p]) < 1e-6
    with pytest.raises(ShapeError):
        mse_loss(Value(p), np.zeros((4, 3)))


# --- backward ----------------------------------------------------------------


def test_backward_linear_and_accumulation():
    x = np.array([1.5, -2.0, 3.0])
    w = Value(np.array([0.3, 0.1, -0.7]), requires_grad=True)
    backward(tc.total(w * Value(x)))
    np.testing.assert_array_equal(w.grad, x)

    w2 = Value(np.array([1.0]), requires_grad=True)
    backward(tc.total(w2 + w2))
    np.testing.assert_array_equal(w2.grad, [2.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        backward(Value(np.zeros(3), requires_grad=True))


def test_backward_fills_unreachable_params_with_zero():
    store = ParameterStore()
    a = store.add("a", np.array([2.0]))
    b = store.add("b", np.array([5.0, 6.0]))
    backward(tc.total(a * a), store)
    np.testing.assert_array_equal(a.grad, [4.0])
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])


# --- adam --------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    store = ParameterStore()
    p = store.add("p", np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    adam_step(store, AdamConfig(lr=0.1))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert p.grad is None and store.adam["p"].step == 1


def test_adam_first_step_is_sign_of_gradient():
    for g in (3.0, -0.02):
        store = ParameterStore()
        p = store.add("w", np.array([0.5]))
        p.grad = np.array([g])
        adam_step(store, AdamConfig(lr=0.01))
        assert p.data[0] == pytest.approx(0.5 - 0.01 * np.sign(g), abs=1e-8)


def test_adam_converges_on_quadratic():
    store = ParameterStore()
    w = store.add("w", np.array([0.0]))
    for _ in range(100):
        loss = (w - 3.0) * (w - 3.0)
        backward(tc.total(loss), store)
        adam_step(store, AdamConfig(lr=0.1))
    # value from running the scalar Adam recurrence by hand in float64
    assert w.data[0] == pytest.approx(2.9806554375278123, abs=1e-12)
    assert abs(w.data[0] - 3.0) < 0.05


def test_adam_missing_gradient_named():
    store = ParameterStore()
    store.add("lonely", np.zeros(1))
    with pytest.raises(RuntimeError, match="lonely"):
        adam_step(store, AdamConfig())


def test_adam_config_validation():
    with pytest.raises(ValueError):
        AdamConfig(beta1=1.0)
    with pytest.raises(ValueError):
        AdamConfig(eps=0)


def test_forward_is_deterministic():
    x, w, b = rnd(40, 2, 3, 2, 8, 8), rnd(41, 4, 3, 1, 3, 3), rnd(42, 4)
    one = conv_ct33(Value(x), Value(w), Value(b)).data
    two = conv_ct33(Value(x), Value(w), Value(b)).data
    assert one.tobytes() == two.tobytes()
