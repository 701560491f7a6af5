import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpgmerge import nets
from dpgmerge.nets import (AdamState, GradVector, NetworkParams, ShapeError,
                           adam_step, backprop, finite_diff_grad, forward,
                           forward_cached, grad_input, grad_params, init_network,
                           load_params, save_params)


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# construction and shapes


def test_init_network_shapes_and_bounds():
    net = init_network([3, 16, 2], ["relu", "tanh"], rng())
    assert net.layer_shapes == [(3, 16), (16, 2)]
    assert net.n_params == 3 * 16 + 16 + 16 * 2 + 2
    for (w, b), d_in in zip(net.layer_views(), (3, 16)):
        bound = 1.0 / np.sqrt(d_in)
        assert np.all(np.abs(w) <= bound) and np.all(np.abs(b) <= bound)


def test_network_params_rejects_non_composing_shapes():
    with pytest.raises(ShapeError):
        NetworkParams([(3, 4), (5, 2)], ["relu", "identity"], np.zeros(3 * 4 + 4 + 5 * 2 + 2))


def test_network_params_rejects_wrong_value_length():
    with pytest.raises(ShapeError):
        NetworkParams([(2, 2)], ["identity"], np.zeros(5))


def test_network_params_rejects_unknown_activation():
    with pytest.raises(ShapeError):
        NetworkParams([(2, 2)], ["sigmoid"], np.zeros(6))


def test_forward_rejects_wrong_input_dim():
    net = init_network([3, 2], ["identity"], rng())
    with pytest.raises(ShapeError):
        forward(net, np.zeros(4))


def test_with_values_shares_architecture_not_buffer():
    net = init_network([2, 2], ["relu"], rng())
    other = net.with_values(np.zeros(net.n_params))
    assert other.layer_shapes == net.layer_shapes
    assert not np.shares_memory(other.values, net.values)


# ---------------------------------------------------------------------------
# forward semantics


def test_single_layer_identity_is_affine():
    net = init_network([3, 2], ["identity"], rng(1))
    (w, b), = net.layer_views()
    x = rng(2).standard_normal(3)
    assert np.allclose(forward(net, x), x @ w + b, atol=0, rtol=0)


def test_batch_forward_matches_loop():
    net = init_network([4, 8, 3], ["relu", "tanh"], rng(3))
    X = rng(4).standard_normal((7, 4))
    batched = forward(net, X)
    rows = np.stack([forward(net, x) for x in X])
    assert np.allclose(batched, rows, rtol=1e-12, atol=1e-14)


def test_relu_subgradient_at_zero_is_zero():
    # one layer, weight 1, bias 0: pre-activation is exactly 0 at x = 0
    net = NetworkParams([(1, 1)], ["relu"], np.array([1.0, 0.0]))
    g = grad_input(net, np.array([0.0]), np.array([1.0]))
    assert g.values[0] == 0.0


def test_tanh_output_bounded():
    net = init_network([2, 8, 2], ["relu", "tanh"], rng(5))
    X = rng(6).standard_normal((64, 2)) * 100
    assert np.all(np.abs(forward(net, X)) <= 1.0)


# ---------------------------------------------------------------------------
# gradients vs finite differences


@pytest.mark.parametrize("dims,acts", [
    ([2, 1], ["identity"]),
    ([3, 5, 2], ["tanh", "identity"]),
    ([4, 8, 8, 1], ["relu", "relu", "tanh"]),
    ([2, 6, 3], ["relu", "tanh"]),
])
def test_param_gradient_matches_finite_differences(dims, acts):
    net = init_network(dims, acts, rng(7))
    # keep away from ReLU kinks by shifting pre-activations
    x = rng(8).standard_normal(dims[0]) * 0.7
    u = rng(9).standard_normal(dims[-1])
    analytic = grad_params(net, x, u).values
    fd = finite_diff_grad(lambda v: float(u @ forward(net.with_values(v), x)),
                          net.values, 1e-6).values
    scale = max(1.0, np.max(np.abs(analytic)))
    assert np.max(np.abs(analytic - fd)) / scale < 1e-6


def test_input_gradient_matches_finite_differences():
    net = init_network([3, 7, 2], ["tanh", "identity"], rng(10))
    x = rng(11).standard_normal(3)
    u = rng(12).standard_normal(2)
    analytic = grad_input(net, x, u).values
    fd = finite_diff_grad(lambda v: float(u @ forward(net, v)), x, 1e-6).values
    assert np.max(np.abs(analytic - fd)) < 1e-6


def test_batch_gradient_is_sum_of_per_item_gradients():
    net = init_network([2, 5, 2], ["relu", "identity"], rng(13))
    X = rng(14).standard_normal((6, 2))
    U = rng(15).standard_normal((6, 2))
    _, cache = forward_cached(net, X)
    g_batch, _ = backprop(net, cache, U)
    g_sum = sum(grad_params(net, x, u).values for x, u in zip(X, U))
    assert np.allclose(g_batch, g_sum, atol=1e-12)


def test_backprop_rejects_upstream_shape_mismatch():
    net = init_network([2, 3], ["identity"], rng(16))
    _, cache = forward_cached(net, np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        backprop(net, cache, np.zeros((4, 2)))


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_fresh_state_is_noop():
    net = init_network([2, 2], ["identity"], rng(17))
    before = net.values.copy()
    adam_step(AdamState.for_net(net, 0.1), net, np.zeros(net.n_params))
    assert np.array_equal(net.values, before)


def test_adam_first_step_moves_by_rate_sign():
    net = init_network([2, 2], ["identity"], rng(18))
    g = rng(19).standard_normal(net.n_params)
    before = net.values.copy()
    adam_step(AdamState.for_net(net, 0.01), net, g, "descent")
    moved = net.values - before
    # bias-corrected first step is -rate * g / (|g| + eps)
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(moved, expected, atol=1e-12)


def test_adam_ascent_is_negated_descent():
    g = rng(20).standard_normal(4)
    net_a = init_network([1, 2], ["identity"], rng(21))
    net_d = net_a.copy()
    start = net_a.values.copy()
    adam_step(AdamState.for_net(net_a, 0.05), net_a, g, "ascent")
    adam_step(AdamState.for_net(net_d, 0.05), net_d, g, "descent")
    assert np.allclose(net_a.values - start, -(net_d.values - start), atol=1e-12)


def test_adam_rejects_nonfinite_gradient():
    net = init_network([1, 1], ["identity"], rng(22))
    g = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError):
        adam_step(AdamState.for_net(net, 0.1), net, g)


def test_adam_optimizes_quadratic():
    net = NetworkParams([(1, 1)], ["identity"], np.array([3.0, -2.0]))
    state = AdamState.for_net(net, 0.05)
    for _ in range(2000):
        adam_step(state, net, 2.0 * net.values, "descent")
    assert np.max(np.abs(net.values)) < 1e-3


@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_adam_step_size_bounded_by_rate(seed):
    r = np.random.default_rng(seed)
    net = init_network([2, 3], ["identity"], r)
    state = AdamState.for_net(net, 0.01)
    before = net.values.copy()
    adam_step(state, net, r.standard_normal(net.n_params) * 10.0 ** float(r.integers(-3, 4)))
    # Adam's bias-corrected first step never exceeds the learning rate (+eps slop)
    assert np.max(np.abs(net.values - before)) <= 0.01 + 1e-9


# ---------------------------------------------------------------------------
# finite differences and serialization


def test_finite_diff_rejects_bad_h():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda v: 0.0, np.zeros(2), 0.0)


def test_finite_diff_nonfinite_evaluation_raises():
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda v: float("nan"), np.zeros(1), 1e-6)


def test_save_load_roundtrip_bitwise(tmp_path):
    net = init_network([3, 9, 4, 2], ["relu", "tanh", "identity"], rng(23))
    path = tmp_path / "net.bin"
    save_params(net, path)
    loaded = load_params(path)
    assert loaded.layer_shapes == net.layer_shapes
    assert loaded.activations == net.activations
    assert np.array_equal(loaded.values, net.values)


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError):
        load_params(path)


def test_grad_vector_tags():
    with pytest.raises(ValueError):
        GradVector(np.zeros(3), "weights")
