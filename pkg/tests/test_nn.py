import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from devtrace.nn import (
    LSTM,
    Adam,
    AttentionFuse,
    BatchNorm,
    BiLSTM,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    MaxPool2D,
    NumericError,
    ReLU,
    Reshape,
    Residual,
    Sequential,
    Splice,
    grad_check,
    load_checkpoint,
    rel_error,
    save_checkpoint,
    softmax,
    softmax_xent,
)
from devtrace.trainer import single_thread

F64 = np.float64
TOL = 1e-4


def _layers(rng):
    return {
        "dense": (Dense(5, 4, rng, F64), (3, 5)),
        "conv5x5": (Conv2D(2, 3, 5, rng, F64), (2, 6, 5, 2)),
        "conv3x3": (Conv2D(2, 3, 3, rng, F64), (2, 5, 4, 2)),
        "conv1x1": (Conv2D(3, 2, 1, rng, F64), (2, 3, 4, 3)),
        "maxpool_odd": (MaxPool2D(), (2, 5, 7, 3)),
        "avgpool": (GlobalAvgPool(), (2, 3, 4, 2)),
        "batchnorm_train": (BatchNorm(3, F64), (4, 5, 3)),
        "relu": (ReLU(), (4, 6)),
        "reshape": (Sequential(Reshape(3, 4, 1), Flatten()), (2, 12)),
        "lstm": (LSTM(4, 3, rng, F64), (2, 3, 4)),
        "lstm_seq_reverse": (LSTM(4, 3, rng, F64, return_sequences=True, reverse=True), (2, 3, 4)),
        "bilstm": (BiLSTM(4, 3, rng, F64), (2, 3, 4)),
        "bilstm_seq": (BiLSTM(4, 3, rng, F64, return_sequences=True), (2, 4, 4)),
        "residual": (Residual(Sequential(BatchNorm(2, F64), ReLU(), Conv2D(2, 2, 3, rng, F64)), MaxPool2D()),
                     (2, 5, 4, 2)),
        "attention_fuse": (AttentionFuse(rng, dtype=F64), [(2, 12), (2, 12)]),
        "splice": (Splice(), [(2, 5), (2, 5)]),
    }


LAYER_NAMES = list(_layers(np.random.default_rng(0)))


@pytest.mark.parametrize("name", LAYER_NAMES)
def test_layer_gradients(backend, name):
    layer, shape = _layers(np.random.default_rng(3))[name]
    err, per = grad_check(layer, shape, seed=1)
    assert err < TOL, per


def test_batchnorm_inference_gradients():
    bn = BatchNorm(3, F64)
    bn.running_mean[:] = [0.5, -1.0, 2.0]
    bn.running_var[:] = [2.0, 0.5, 1.5]
    err, per = grad_check(bn, (4, 3), seed=2, train=False)
    assert err < TOL, per


def test_dropout_gradients_both_modes():
    d = Dropout(0.4, np.random.default_rng(0))
    assert grad_check(d, (5, 6), train=False)[0] < TOL

    def freeze():
        d.rng = np.random.default_rng(9)

    assert grad_check(d, (5, 6), train=True, before_forward=freeze)[0] < TOL


def test_softmax_xent_gradient(rng):
    logits = rng.standard_normal((4, 6))
    labels = np.array([0, 5, 2, 2])
    _, d = softmax_xent(logits, labels)
    num = np.zeros_like(logits)
    eps = 1e-6
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += eps
        down[idx] -= eps
        num[idx] = (softmax_xent(up, labels)[0] - softmax_xent(down, labels)[0]) / (2 * eps)
    assert rel_error(d, num) < 1e-6


def test_softmax_xent_values():
    K = 45
    loss, d = softmax_xent(np.zeros((3, K)), np.array([0, 10, 44]))
    assert loss == pytest.approx(math.log(K), rel=1e-14)
    big = np.zeros((2, 4))
    big[[0, 1], [1, 3]] = 1e6
    assert softmax_xent(big, np.array([1, 3]))[0] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        softmax_xent(np.zeros((2, 3)), np.array([0, 3]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 9)), elements=st.floats(-500, 500)))
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(softmax(x).sum(axis=1), 1.0, atol=1e-9)


# -- forward definitions ---------------------------------------------------------

def test_dense_identity(rng):
    d = Dense(4, 4, rng, F64)
    d.W.data[...] = np.eye(4)
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(d.forward(x), x)


def test_conv_one_hot_1x1_selects_channel(rng):
    c = Conv2D(3, 1, 1, rng, F64)
    c.W.data[...] = 0
    c.W.data[0, 0, 2, 0] = 1
    x = rng.standard_normal((2, 4, 5, 3))
    np.testing.assert_array_equal(c.forward(x)[..., 0], x[..., 2])


def test_conv_matches_direct_sum(backend, rng):
    c = Conv2D(2, 3, 3, rng, F64)
    x = rng.standard_normal((1, 4, 5, 2))
    y = c.forward(x)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros_like(y)
    for i in range(4):
        for j in range(5):
            ref[0, i, j] = np.einsum("abc,abcd->d", xp[0, i:i + 3, j:j + 3], c.W.data) + c.b.data
    np.testing.assert_allclose(y, ref, rtol=1e-12)


def test_maxpool_ceil_shape(backend, rng):
    y = MaxPool2D().forward(rng.standard_normal((2, 64, 39, 1)))
    assert y.shape == (2, 32, 20, 1)


def test_dropout_identity_in_inference(rng):
    x = rng.standard_normal((10, 10))
    assert Dropout(0.9, rng).forward(x, train=False) is x


def test_dropout_scaling(rng):
    x = np.ones((400, 400))
    y = Dropout(0.25, np.random.default_rng(0)).forward(x, train=True)
    kept = y[y != 0]
    np.testing.assert_allclose(kept, 1 / 0.75)
    assert abs(kept.size / x.size - 0.75) < 0.01


def test_lstm_zero_weights_give_zero(rng):
    lstm = LSTM(3, 4, rng, F64, return_sequences=True)
    for p in lstm.params().values():
        p.data[...] = 0
    np.testing.assert_array_equal(lstm.forward(rng.standard_normal((2, 5, 3))), 0.0)


def test_lstm_single_step_is_one_cell(backend, rng):
    lstm = LSTM(3, 2, rng, F64)
    x = rng.standard_normal((4, 1, 3))
    z = x[:, 0] @ lstm.Wx.data + lstm.b.data
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    i, g, o = sig(z[:, :2]), np.tanh(z[:, 4:6]), sig(z[:, 6:])
    np.testing.assert_allclose(lstm.forward(x), o * np.tanh(i * g), rtol=1e-13)
    # forget bias starts at one
    np.testing.assert_array_equal(lstm.b.data[2:4], 1.0)


def test_bilstm_palindrome_symmetry(rng):
    bi = BiLSTM(3, 4, rng, F64)
    for name in ("Wx", "Wh", "b"):
        getattr(bi.bwd, name).data[...] = getattr(bi.fwd, name).data
    half = rng.standard_normal((2, 3, 3))
    x = np.concatenate([half, half[:, ::-1]], axis=1)
    out = bi.forward(x)
    assert out.shape == (2, 8)
    np.testing.assert_allclose(out[:, :4], out[:, 4:], rtol=1e-13)


def test_shape_errors(rng):
    with pytest.raises(ValueError):
        Dense(3, 2, rng).forward(np.zeros((1, 4)))
    with pytest.raises(ValueError):
        Conv2D(2, 2, 3, rng).forward(np.zeros((1, 3, 3, 1)))
    with pytest.raises(ValueError):
        LSTM(3, 2, rng).forward(np.zeros((1, 4, 5)))
    with pytest.raises(ValueError):
        Conv2D(1, 1, 4, rng)


def test_non_finite_is_checked():
    from devtrace.nn import check_finite

    with pytest.raises(NumericError):
        check_finite(np.array([1.0, np.nan]), "x")


# -- batchnorm -------------------------------------------------------------------

def test_batchnorm_train_and_inference_agree_after_freezing(rng):
    bn = BatchNorm(4, F64)
    bn.gamma.data[...] = rng.uniform(0.5, 2, 4)
    bn.beta.data[...] = rng.standard_normal(4)
    x = rng.standard_normal((256, 4)) * [1, 2, 3, 4] + [5, -5, 0, 1]
    for _ in range(300):
        bn.forward(x, train=True)
    np.testing.assert_allclose(bn.forward(x, train=True), bn.forward(x, train=False), atol=1e-3)


def test_batchnorm_running_stats_momentum(rng):
    bn = BatchNorm(2, F64)
    x = rng.standard_normal((50, 2)) + 3
    bn.forward(x, train=True)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(0), rtol=1e-12)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(0), rtol=1e-12)


# -- Adam ------------------------------------------------------------------------

def _param_layer(value):
    d = Dense(1, 1, np.random.default_rng(0), F64)
    d.W.data[...] = value
    return d


def test_adam_zero_gradient_is_noop():
    d = _param_layer(0.7)
    opt = Adam(d.params(), lr=0.1)
    opt.zero_grad()
    opt.step()
    assert d.W.data[0, 0] == 0.7 and opt.state.step == 1


def test_adam_first_step_is_lr_times_sign():
    d = _param_layer(0.0)
    opt = Adam(d.params(), lr=0.01)
    d.W.grad[...] = -3.0
    opt.step()
    assert d.W.data[0, 0] == pytest.approx(0.01, rel=1e-6)


def test_adam_minimizes_square():
    # oracle: plain scalar re-simulation of the same update
    d = _param_layer(1.0)
    opt = Adam({"w": d.W}, lr=0.1)
    w, m, v = 1.0, 0.0, 0.0
    for t in range(1, 101):
        d.W.grad[...] = 2 * d.W.data
        opt.step()
        g = 2 * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(d.W.data[0, 0]) < 0.1
    assert d.W.data[0, 0] == pytest.approx(w, rel=1e-12, abs=1e-15)


# -- determinism -----------------------------------------------------------------

def _train_steps(seed, n_steps=5):
    rng = np.random.default_rng(seed)
    net = Sequential(Dense(6, 8, rng, np.float32), ReLU(), Dropout(0.3, rng), Dense(8, 3, rng, np.float32))
    opt = Adam(net.params(), lr=1e-2)
    data = np.random.default_rng(99)
    for _ in range(n_steps):
        x = data.standard_normal((16, 6)).astype(np.float32)
        y = data.integers(0, 3, 16)
        _, d = softmax_xent(net.forward(x, train=True), y)
        opt.zero_grad()
        net.backward(d.astype(np.float32))
        opt.step()
    return {k: p.data.copy() for k, p in net.params().items()}


def test_training_is_bit_identical_given_seed():
    with single_thread():
        a, b = _train_steps(4), _train_steps(4)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    net = Sequential(Dense(3, 4, rng, np.float32), BatchNorm(4, np.float32), Dense(4, 2, rng, F64))
    net.forward(rng.standard_normal((5, 3)).astype(np.float32), train=True)
    opt = Adam(net.params(), lr=3e-4)
    for p in net.params().values():
        p.grad[...] = 1.0
    opt.step()
    path = tmp_path / "net.dtck"
    save_checkpoint(path, net.params(), net.buffers(), {"kind": "test"}, opt.state)
    params, buffers, meta, st_ = load_checkpoint(path)
    assert meta == {"kind": "test"}
    for k, p in net.params().items():
        assert params[k].dtype == p.data.dtype
        np.testing.assert_array_equal(params[k], p.data)
    for k, b in net.buffers().items():
        np.testing.assert_array_equal(buffers[k], b)
    assert (st_.step, st_.lr) == (1, 3e-4)
    for k in opt.state.m:
        np.testing.assert_array_equal(st_.m[k], opt.state.m[k])
        np.testing.assert_array_equal(st_.v[k], opt.state.v[k])
    (tmp_path / "bad").write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
