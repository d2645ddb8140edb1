import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedper import nn
from fedper.errors import NumericError, RejectedInputError

from conftest import logistic, toy_cnn


def set_slot(model, flat, layer, name, value):
    slot = next(s for s in model.layer_slots(layer) if s.name == name)
    flat[slot.offset:slot.offset + slot.size] = np.asarray(value, float).ravel()


# -- forward -----------------------------------------------------------------


def test_zero_dense_gives_half():
    model = logistic(5)
    x = np.random.default_rng(0).normal(size=(7, 5))
    np.testing.assert_array_equal(nn.forward(model, np.zeros(model.n_params), x), 0.5)


def test_identity_kernel_then_relu_keeps_input():
    model = nn.Model((nn.Conv2D(1, (1, 1)), nn.ReLU(), nn.Dense(1), nn.Sigmoid()), (3, 3, 1))
    flat = np.zeros(model.n_params)
    set_slot(model, flat, 0, "W", [[[[1.0]]]])
    x = np.random.default_rng(1).uniform(size=(2, 3, 3, 1))
    out = nn.features(model, flat, x, stop=2)
    np.testing.assert_array_equal(out, x)


def test_maxpool_2x2():
    model = nn.Model((nn.MaxPool(2, 2), nn.Dense(1), nn.Sigmoid()), (2, 2, 1))
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    out = nn.features(model, np.zeros(model.n_params), x, stop=1)
    assert out.shape == (1, 1, 1, 1) and out.item() == 4.0


def test_forward_is_clamped(rng):
    model = logistic(2)
    flat = np.array([1e3, 1e3, 0.0])
    p = nn.forward(model, flat, np.array([[1.0, 1.0], [-1.0, -1.0]]))
    assert p[0] == 1 - nn.EPS and p[1] == nn.EPS


def test_forward_shape_mismatch(rng):
    model = toy_cnn(rng)
    with pytest.raises(RejectedInputError):
        nn.forward(model, nn.init_params(model, rng), np.zeros((2, 5, 5, 1)))


def test_forward_non_finite_params(rng):
    model = toy_cnn(rng)
    flat = nn.init_params(model, rng)
    flat[3] = np.nan
    with pytest.raises(NumericError):
        nn.forward(model, flat, np.zeros((2, 6, 6, 1)))


def test_forward_deterministic(rng):
    model = toy_cnn(rng)
    flat = nn.init_params(model, rng)
    x = rng.uniform(size=(4, 6, 6, 1))
    assert nn.forward(model, flat, x).tobytes() == nn.forward(model, flat, x).tobytes()


def test_model_needs_single_terminal_sigmoid():
    with pytest.raises(RejectedInputError):
        nn.Model((nn.Dense(1),), (3,))
    with pytest.raises(RejectedInputError):
        nn.Model((nn.Sigmoid(), nn.Dense(1), nn.Sigmoid()), (3,))
    with pytest.raises(RejectedInputError):
        nn.Model((nn.Dense(2), nn.Sigmoid()), (3,))


# -- loss --------------------------------------------------------------------


def test_bce_half():
    assert math.isclose(nn.bce_loss([0.5], [1]), math.log(2), rel_tol=1e-12)


def test_bce_perfect():
    assert 0 <= nn.bce_loss([1.0], [1]) <= 2 * nn.EPS


def test_bce_hand_value():
    # -(ln 0.9 + ln 0.9) / 2
    assert abs(nn.bce_loss([0.9, 0.1], [1, 0]) - 0.105360515657826) < 1e-12


def test_bce_empty():
    with pytest.raises(RejectedInputError):
        nn.bce_loss([], [])


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=20))
def test_bce_non_negative(pairs):
    p, y = zip(*pairs)
    assert nn.bce_loss(p, y) >= 0


# -- backward ----------------------------------------------------------------


def test_logistic_bias_gradient_at_zero():
    model = logistic(4)
    x = np.random.default_rng(2).normal(size=(1, 4))
    g = nn.backward(model, np.zeros(model.n_params), x, [1])
    assert g[-1] == -0.5
    np.testing.assert_allclose(g[:4], -0.5 * x[0])


def test_duplicated_row_same_gradient(rng):
    model = toy_cnn(rng, bn=False)
    flat = nn.init_params(model, rng)
    x = rng.uniform(size=(1, 6, 6, 1))
    g1 = nn.backward(model, flat, x, [1])
    g2 = nn.backward(model, flat, np.concatenate([x, x]), [1, 1])
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)


def test_gradient_check_linear():
    model = logistic(3)
    rng = np.random.default_rng(3)
    flat = rng.normal(size=model.n_params)
    assert nn.gradient_check(model, flat, rng.normal(size=(5, 3)), [0, 1, 1, 0, 1]) <= 1e-6


def test_gradient_check_toy_cnn(rng):
    model = toy_cnn(rng)
    flat = nn.init_params(model, rng)
    x = rng.uniform(size=(4, 6, 6, 1))
    assert nn.gradient_check(model, flat, x, [0, 1, 1, 0]) <= 1e-4


def test_gradient_check_detects_corruption(rng):
    model = toy_cnn(rng)
    flat = nn.init_params(model, rng)
    x = rng.uniform(size=(4, 6, 6, 1))
    y = [0, 1, 1, 0]
    g = nn.backward(model, flat, x, y)
    g[5] += 1.0
    assert nn.gradient_check(model, flat, x, y, gradient=g) >= 0.5


def test_gradient_check_float32_model(rng):
    # float32 compute is only used for speed; its gradient stays close
    m64 = toy_cnn(rng)
    m32 = toy_cnn(rng, dtype="float32")
    flat = nn.init_params(m64, rng)
    x = rng.uniform(size=(4, 6, 6, 1))
    g64 = nn.backward(m64, flat, x, [0, 1, 1, 0])
    g32 = nn.backward(m32, flat, x, [0, 1, 1, 0])
    np.testing.assert_allclose(g32, g64, atol=1e-5 * np.abs(g64).max())


def test_strided_valid_conv_gradient(rng):
    model = nn.Model((nn.Conv2D(2, (3, 3), stride=2, padding="valid"), nn.ReLU(), nn.Dense(1), nn.Sigmoid()),
                     (7, 7, 1))
    flat = nn.init_params(model, rng)
    assert nn.gradient_check(model, flat, rng.uniform(size=(3, 7, 7, 1)), [1, 0, 1]) <= 1e-4


# -- sgd ---------------------------------------------------------------------


def test_sgd_examples():
    assert nn.sgd_step(np.array([1.0]), np.array([2.0]), 0.5).tolist() == [0.0]
    theta = np.array([0.3, -2.0])
    np.testing.assert_array_equal(nn.sgd_step(theta, np.zeros(2), 0.1), theta)
    np.testing.assert_allclose(nn.sgd_step(np.array([1.0, -1.0]), np.array([0.1, 0.1]), 1e-4),
                               [0.99999, -1.00001], rtol=0, atol=1e-15)


def test_sgd_is_pure():
    theta = np.array([1.0, 2.0])
    nn.sgd_step(theta, np.array([1.0, 1.0]), 0.5)
    assert theta.tolist() == [1.0, 2.0]


def test_sgd_rejects():
    with pytest.raises(RejectedInputError):
        nn.sgd_step(np.zeros(2), np.zeros(3), 0.1)
    with pytest.raises(RejectedInputError):
        nn.sgd_step(np.zeros(2), np.zeros(2), 0.0)


def test_sgd_on_parameter_set(rng):
    model = toy_cnn(rng)
    ps = nn.partition_params(model, nn.init_params(model, rng))
    out = nn.sgd_step(ps, np.ones(model.n_params), 0.5)
    assert isinstance(out, nn.ParameterSet)
    np.testing.assert_array_equal(out.merge(), ps.merge() - 0.5)


dyadic = st.integers(-2**20, 2**20).map(lambda k: k / 2**10)


@given(st.lists(st.tuples(dyadic, dyadic), min_size=1, max_size=10),
       st.sampled_from([0.5, 0.25, 2.0**-7]))
def test_sgd_reversible_on_dyadics(pairs, lr):
    theta, g = (np.array(v) for v in zip(*pairs))
    back = nn.sgd_step(nn.sgd_step(theta, g, lr), -g, lr)
    np.testing.assert_array_equal(back, theta)


# -- partition ---------------------------------------------------------------


def test_partition_ten_and_four():
    # conv 3x3, one filter: 9 weights + 1 bias; dense over 3 features: 3 + 1
    model = nn.Model((nn.Conv2D(1, (3, 3)), nn.Dense(1), nn.Sigmoid()), (1, 3, 1))
    ps = nn.partition_params(model, np.arange(14, dtype=float))
    assert (len(ps.shared), len(ps.local)) == (10, 4)
    np.testing.assert_array_equal(ps.merge(), np.arange(14.0))


def test_partition_round_trip(rng):
    model = toy_cnn(rng)
    flat = rng.normal(size=model.n_params)
    ps = nn.partition_params(model, flat)
    assert len(ps.shared) + len(ps.local) == model.n_params
    np.testing.assert_array_equal(nn.merge_params(ps), flat)


def test_partition_wrong_length(rng):
    model = toy_cnn(rng)
    with pytest.raises(RejectedInputError):
        nn.partition_params(model, np.zeros(model.n_params + 1))


def test_pain_cnn_local_block_size():
    model = nn.pain_cnn(28)
    # 28 -> 14 -> 7 -> 3 after three pools, 64 channels
    f = 3 * 3 * 64
    assert model.n_local == 128 * f + 128 + 128 + 1
    assert model.n_shared + model.n_local == model.n_params


def test_pain_cnn_prediction_only_boundary():
    model = nn.pain_cnn(28, local="prediction")
    assert model.n_local == 128 + 1


def test_boundary_is_stable(rng):
    model = toy_cnn(rng)
    b = model.boundary
    nn.forward(model, nn.init_params(model, rng), rng.uniform(size=(2, 6, 6, 1)))
    assert model.boundary == b
    with pytest.raises(Exception):
        model.boundary = 0


# -- training step -----------------------------------------------------------


def test_train_step_updates_running_stats(rng):
    model = toy_cnn(rng)
    flat = nn.init_params(model, rng)
    new, _ = nn.train_step(model, flat, rng.uniform(size=(4, 6, 6, 1)), [0, 1, 0, 1], 0.1)
    mean = next(s for s in model.layer_slots(1) if s.name == "mean")
    assert not np.array_equal(new[mean.offset:mean.offset + mean.size], flat[mean.offset:mean.offset + mean.size])


def test_single_sample_batchnorm_is_finite(rng):
    model = toy_cnn(rng)
    flat = nn.init_params(model, rng)
    value, grad, _ = nn.loss_and_grad(model, flat, rng.uniform(size=(1, 6, 6, 1)), [1])
    assert np.isfinite(value) and np.all(np.isfinite(grad))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_gradient_matches_oracle_property(seed):
    rng = np.random.default_rng(seed)
    model = toy_cnn(rng, size=4, filters=2, units=2)
    flat = nn.init_params(model, rng)
    x = rng.uniform(size=(3, 4, 4, 1))
    assert nn.gradient_check(model, flat, x, rng.integers(0, 2, 3)) <= 1e-4
