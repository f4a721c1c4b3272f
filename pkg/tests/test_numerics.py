import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hvq.numerics import (
    ConfigError,
    OptimConfig,
    ParamStore,
    adamw_step,
    dilated_conv1d_backward,
    dilated_conv1d_forward,
    dropout_mask,
    finite_diff_check,
    pointwise_backward,
    pointwise_forward,
    relu,
    relu_backward,
)


def col(values):
    return np.asarray(values, dtype=np.float64)[:, None]


def ones_kernel(taps=(1.0, 1.0, 1.0)):
    return np.asarray(taps, dtype=np.float64).reshape(3, 1, 1)


# --- dilated convolution ----------------------------------------------------

def test_conv_hand_example_dilation_1():
    out = dilated_conv1d_forward(col([1, 2, 3]), ones_kernel(), np.zeros(1), 1)
    np.testing.assert_array_equal(out[:, 0], [3, 6, 5])


def test_conv_hand_example_dilation_2():
    out = dilated_conv1d_forward(col([1, 2, 3, 4, 5]), ones_kernel(), np.zeros(1), 2)
    np.testing.assert_array_equal(out[:, 0], [4, 6, 9, 6, 8])


@pytest.mark.parametrize("dilation", [1, 2, 5, 64])
def test_identity_tap_passes_input_through(rng, dilation):
    x = rng.standard_normal((7, 1))
    np.testing.assert_array_equal(dilated_conv1d_forward(x, ones_kernel((0, 1, 0)), np.zeros(1), dilation), x)


def test_conv_preserves_length_and_maps_channels(rng):
    x = rng.standard_normal((9, 3))
    out = dilated_conv1d_forward(x, rng.standard_normal((3, 3, 5)), rng.standard_normal(5), 4)
    assert out.shape == (9, 5)


def test_conv_rejects_mismatched_shapes(rng):
    with pytest.raises(ConfigError):
        dilated_conv1d_forward(rng.standard_normal((4, 2)), rng.standard_normal((3, 3, 1)), np.zeros(1), 1)
    with pytest.raises(ConfigError):
        dilated_conv1d_forward(rng.standard_normal((4, 2)), rng.standard_normal((3, 2, 1)), np.zeros(2), 1)
    with pytest.raises(ConfigError):
        dilated_conv1d_forward(rng.standard_normal((4, 2)), rng.standard_normal((3, 2, 1)), np.zeros(1), 0)


def test_conv_backward_zero_upstream(rng):
    x = rng.standard_normal((6, 2))
    k = rng.standard_normal((3, 2, 3))
    dx, dk, db = dilated_conv1d_backward(np.zeros((6, 3)), x, k, 2)
    assert not dx.any() and not dk.any() and not db.any()


def test_conv_backward_identity_layer(rng):
    up = rng.standard_normal((5, 1))
    dx, _, _ = dilated_conv1d_backward(up, rng.standard_normal((5, 1)), ones_kernel((0, 1, 0)), 3)
    np.testing.assert_array_equal(dx, up)


def test_conv_backward_without_cache_is_usage_error(rng):
    with pytest.raises(RuntimeError, match="cached"):
        dilated_conv1d_backward(np.ones((4, 1)), None, ones_kernel(), 1)


def _conv_store(rng):
    T = int(rng.integers(1, 9))
    cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    store = ParamStore()
    store.add("x", rng.standard_normal((T, cin)))
    store.add("w", rng.standard_normal((3, cin, cout)))
    store.add("b", rng.standard_normal(cout))
    return store, rng.standard_normal((T, cout)), int(rng.integers(1, 5))


@pytest.mark.parametrize("seed", range(20))
def test_conv_gradients_match_finite_differences(seed):
    store, weights, dilation = _conv_store(np.random.default_rng(seed))

    def loss(p):
        out = dilated_conv1d_forward(p["x"], p["w"], p["b"], dilation)
        dx, dw, db = dilated_conv1d_backward(weights, p["x"], p["w"], dilation)
        return float(np.sum(weights * out)), {"x": dx, "w": dw, "b": db}

    assert finite_diff_check(loss, store) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_pointwise_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    T, cin, cout = int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    store = ParamStore()
    store.add("x", rng.standard_normal((T, cin)))
    store.add("w", rng.standard_normal((cin, cout)))
    store.add("b", rng.standard_normal(cout))
    weights = rng.standard_normal((T, cout))

    def loss(p):
        out = pointwise_forward(p["x"], p["w"], p["b"])
        dx, dw, db = pointwise_backward(weights, p["x"], p["w"])
        return float(np.sum(weights * out)), {"x": dx, "w": dw, "b": db}

    assert finite_diff_check(loss, store) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_relu_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(200 + seed)
    x = rng.standard_normal((int(rng.integers(1, 9)), 3))
    x[np.abs(x) < 1e-3] = 0.5  # keep probes away from the kink
    store = ParamStore()
    store.add("x", x)
    weights = rng.standard_normal(x.shape)

    def loss(p):
        return float(np.sum(weights * relu(p["x"]))), {"x": relu_backward(weights, p["x"])}

    assert finite_diff_check(loss, store) < 1e-4


# --- relu -----------------------------------------------------------------

def test_relu_examples():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(relu_backward(np.array([5.0, 5, 5]), np.array([-1.0, 0, 2])), [0, 0, 5])
    x = np.array([0.5, 3.0])
    np.testing.assert_array_equal(relu(x), x)


# --- AdamW ----------------------------------------------------------------

def _scalar_store(w, g):
    store = ParamStore()
    store.add("w", np.array([w], dtype=np.float64))
    store.grads["w"][:] = g
    return store


def test_adamw_first_step_moves_by_learning_rate():
    store = adamw_step(_scalar_store(1.0, 1.0), OptimConfig(learning_rate=0.1, weight_decay=0.0))
    assert store["w"][0] == pytest.approx(0.9, abs=1e-6)
    assert store.step == 1


def test_adamw_zero_gradient_no_decay_is_identity():
    store = adamw_step(_scalar_store(1.0, 0.0), OptimConfig(learning_rate=0.1, weight_decay=0.0))
    assert store["w"][0] == 1.0


def test_adamw_decay_only():
    store = adamw_step(_scalar_store(1.0, 0.0), OptimConfig(learning_rate=0.1, weight_decay=0.1))
    assert store["w"][0] == pytest.approx(0.99, abs=1e-15)


def test_adamw_is_bitwise_deterministic(rng):
    a = ParamStore()
    a.add("w", rng.standard_normal((4, 3)))
    a.grads["w"][:] = rng.standard_normal((4, 3))
    b = a.copy()
    for _ in range(3):
        adamw_step(a, OptimConfig())
        adamw_step(b, OptimConfig())
    assert a["w"].tobytes() == b["w"].tobytes()
    assert a.exp_avg_sq["w"].tobytes() == b.exp_avg_sq["w"].tobytes()


def test_adamw_clip_norm_caps_effective_gradient():
    clipped = adamw_step(_scalar_store(0.0, 100.0), OptimConfig(learning_rate=1.0, weight_decay=0.0,
                                                                clip_norm=1.0))
    # Adam normalises magnitude away, so clipping shows up only in the moments.
    assert clipped.exp_avg["w"][0] == pytest.approx(0.1)


@pytest.mark.parametrize("kwargs", [dict(learning_rate=0), dict(beta1=1.0), dict(beta2=-0.1),
                                    dict(epsilon=0), dict(weight_decay=-1)])
def test_optim_config_validation(kwargs):
    with pytest.raises(ConfigError):
        OptimConfig(**kwargs)


# --- ParamStore and finite differences -------------------------------------

def test_param_store_bookkeeping(rng):
    store = ParamStore()
    store.add("a", rng.standard_normal((2, 3)))
    store.add("b", rng.standard_normal(4))
    assert store.num_parameters() == 10
    assert sorted(store) == ["a", "b"] and len(store) == 2
    store.accumulate("b", np.ones(4))
    store.accumulate("b", np.ones(4))
    assert store.grad_norm() == pytest.approx(4.0)
    store.zero_grad()
    assert store.grad_norm() == 0.0
    with pytest.raises(KeyError):
        store.accumulate("missing", np.ones(1))


def test_finite_diff_exact_on_quadratic(rng):
    store = ParamStore()
    store.add("w", rng.standard_normal(6))
    assert finite_diff_check(lambda p: (0.5 * float(p["w"] @ p["w"]), {"w": p["w"].copy()}), store) < 1e-8


def test_finite_diff_empty_store_is_zero():
    assert finite_diff_check(lambda p: (1.0, {}), ParamStore()) == 0.0


def test_finite_diff_reports_wrong_gradient(rng):
    store = ParamStore()
    store.add("w", rng.standard_normal(3))
    assert finite_diff_check(lambda p: (float(np.sum(p["w"] ** 2)), {"w": p["w"].copy()}), store) > 0.4


def test_finite_diff_rejects_non_finite_loss():
    store = ParamStore()
    store.add("w", np.ones(2))
    with pytest.raises(FloatingPointError):
        finite_diff_check(lambda p: (float("nan"), {"w": np.zeros(2)}), store)


# --- dropout ----------------------------------------------------------------

def test_dropout_mask_is_inverted_and_seeded():
    a = dropout_mask((200, 50), 0.3, np.random.default_rng(0))
    b = dropout_mask((200, 50), 0.3, np.random.default_rng(0))
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 1.0 / 0.7}
    assert a.mean() == pytest.approx(1.0, abs=0.05)
    assert (dropout_mask((3, 3), 0.0, np.random.default_rng(0)) == 1.0).all()


@settings(max_examples=40, deadline=None)
@given(T=st.integers(1, 12), dilation=st.integers(1, 20), seed=st.integers(0, 2**16))
def test_conv_is_linear_in_input(T, dilation, seed):
    rng = np.random.default_rng(seed)
    k = rng.standard_normal((3, 2, 2))
    x, y = rng.standard_normal((T, 2)), rng.standard_normal((T, 2))
    zero = np.zeros(2)
    lhs = dilated_conv1d_forward(2 * x + y, k, zero, dilation)
    rhs = 2 * dilated_conv1d_forward(x, k, zero, dilation) + dilated_conv1d_forward(y, k, zero, dilation)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
