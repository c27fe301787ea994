import numpy as np
import pytest
from hypothesis import given, strategies as st

from arbfree.nn import AdamState, Mlp, ShapeError, adam_step, backward, forward, input_jacobian, mlp_from_dict, mlp_to_dict, weighted_hessian_trace

from helpers import derivative_errors, random_net, rel_err


def linear(w, b):
    return Mlp((w.shape[0], w.shape[1]), ("identity",), [w], [b])


def test_zero_net_outputs_zero():
    net = Mlp((3, 4, 2), ("tanh", "identity"), [np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)])
    np.testing.assert_array_equal(forward(net, [1.0, -2.0, 3.0]), 0.0)


def test_identity_layer():
    x = np.array([0.3, -1.2, 4.0])
    np.testing.assert_array_equal(forward(linear(np.eye(3), np.zeros(3)), x), x)


def test_two_layer_tanh_against_reference(rng):
    net = Mlp.init((4, 6, 2), rng)
    net.biases[0][:] = rng.standard_normal(6)
    x = rng.standard_normal(4)
    ref = np.tanh(x @ net.weights[0] + net.biases[0]) @ net.weights[1] + net.biases[1]
    assert np.max(np.abs(forward(net, x) - ref)) <= 1e-12


def test_dimension_mismatch():
    net = linear(np.eye(3), np.zeros(3))
    with pytest.raises(ShapeError):
        forward(net, np.zeros(2))
    with pytest.raises(ShapeError):
        backward(net, np.zeros(3), np.zeros(2))


def test_param_count_from_widths(rng):
    net = Mlp.init((5, 7, 3), rng)
    assert net.n_params == sum(p.size for p in net.params) == 5 * 7 + 7 + 7 * 3 + 3


def test_linear_backward_is_outer_product(rng):
    w, b = rng.standard_normal((3, 2)), rng.standard_normal(2)
    x, up = rng.standard_normal(3), rng.standard_normal(2)
    grads, gx = backward(linear(w, b), x, up)
    np.testing.assert_allclose(grads[0], np.outer(x, up), atol=1e-15)
    np.testing.assert_allclose(grads[1], up, atol=1e-15)
    np.testing.assert_allclose(gx, w @ up, atol=1e-15)


def test_zero_upstream_zero_grads(rng):
    net = random_net(rng)
    grads, gx = backward(net, rng.standard_normal(net.widths[0]), np.zeros(net.widths[-1]))
    assert all(np.all(g == 0) for g in grads) and np.all(gx == 0)


def test_accumulate_adds(rng):
    net = random_net(rng)
    x = rng.standard_normal((3, net.widths[0]))
    up = rng.standard_normal((3, net.widths[-1]))
    _, cache = net.forward_cached(x)
    g1, _ = net.backward(cache, up)
    g2 = [g.copy() for g in g1]
    net.backward(cache, up, grads=g2, accumulate=True)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-15)


def test_linear_jacobian_is_weight_product(rng):
    w1, w2 = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    net = Mlp((3, 4, 2), ("identity", "identity"), [w1, w2], [np.zeros(4), np.zeros(2)])
    np.testing.assert_allclose(input_jacobian(net, rng.standard_normal(3)), (w1 @ w2).T, atol=1e-14)


def test_jacobian_vanishes_under_saturation(rng):
    net = Mlp((2, 3), ("tanh",), [np.ones((2, 3))], [np.zeros(3)])
    assert np.max(np.abs(input_jacobian(net, np.array([40.0, 40.0])))) < 1e-30


def test_derivatives_match_finite_differences():
    rng = np.random.default_rng(11)
    worst = np.zeros(3)
    for _ in range(50):
        net = random_net(rng)
        worst = np.maximum(worst, derivative_errors(net, rng, rng.standard_normal(net.widths[0])))
    assert worst[0] < 1e-4 and worst[1] < 1e-4 and worst[2] < 1e-3


def test_hessian_trace_of_quadratic(rng):
    q = rng.standard_normal((3, 3))
    Q = q @ q.T
    A = np.diag([1.0, 2.0, 0.5])
    # softplus''(0) = 1/4, so sum_k 4 softplus(v_k . x) has Hessian V V^T = Q at the origin
    vals, vecs = np.linalg.eigh(Q)
    v = vecs * np.sqrt(vals)
    net = Mlp((3, 3, 1), ("softplus", "identity"), [v, np.full((3, 1), 4.0)], [np.zeros(3), np.zeros(1)])
    assert weighted_hessian_trace(net, np.zeros(3), A) == pytest.approx(np.trace(A @ Q), rel=1e-12)
    assert weighted_hessian_trace(net, np.zeros(3), np.zeros((3, 3))) == 0.0


def test_hessian_trace_rejects_asymmetric(rng):
    net = random_net(rng, widths=[2, 4, 1])
    with pytest.raises(ValueError):
        weighted_hessian_trace(net, np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


@given(st.integers(0, 2**31))
def test_hessian_trace_linear_in_weight(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, widths=[3, 5, 5, 1])
    x = rng.standard_normal(3)
    a, b = rng.standard_normal((2, 3, 3))
    A, B = a + a.T, b + b.T
    lhs = weighted_hessian_trace(net, x, A + B)
    rhs = weighted_hessian_trace(net, x, A) + weighted_hessian_trace(net, x, B)
    assert abs(lhs - rhs) <= 1e-10


@given(st.integers(0, 2**31))
def test_tanh_net_output_bound(seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, widths=[4, 6, 6, 2])
    net.activations = ("tanh", "tanh", "identity")
    x = rng.standard_normal(4) * 3
    bound = np.linalg.norm(x)
    for w, b in zip(net.weights, net.biases):
        bound = np.linalg.norm(w, 2) * bound + np.linalg.norm(b)
    assert np.linalg.norm(forward(net, x)) <= bound + 1e-12


def test_adam_zero_grad_keeps_params():
    p = [np.array([1.0, -2.0])]
    adam_step(p, [np.zeros(2)], AdamState(lr=0.1))
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = [np.array([0.5])]
    adam_step(p, [np.array([3.7])], AdamState(lr=0.01))
    assert p[0][0] == pytest.approx(0.5 - 0.01, abs=1e-9)


def test_adam_deterministic(rng):
    def run():
        p = [np.linspace(-1, 1, 5)]
        st_ = AdamState(lr=0.05)
        for k in range(20):
            adam_step(p, [np.sin(p[0] * (k + 1))], st_)
        return p[0]

    np.testing.assert_array_equal(run(), run())


def test_checkpoint_roundtrip(rng):
    net = random_net(rng)
    back = mlp_from_dict(mlp_to_dict(net))
    assert back.checksum() == net.checksum()
    x = rng.standard_normal(net.widths[0])
    np.testing.assert_array_equal(back.forward(x), net.forward(x))
    assert rel_err(back.forward(x), net.forward(x)) == 0.0
