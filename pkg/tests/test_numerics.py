import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from greip.numerics import (
    AdamState,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    grad_check,
    grad_check_random,
    kink_distance,
    ops,
)


def conv_oracle(x, w, b, stride):
    n, h, wd, _ = x.shape
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    xp = np.zeros((n, h + 2, wd + 2, x.shape[3]))
    xp[:, 1:-1, 1:-1] = x
    out = np.zeros((n, ho, wo, w.shape[3]))
    for i in range(ho):
        for j in range(wo):
            for ky in range(3):
                for kx in range(3):
                    out[:, i, j] += xp[:, i * stride + ky, j * stride + kx] @ w[ky, kx]
    return out + (0 if b is None else b)


def test_relu_example():
    assert ops.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_instance_stats_of_constant_map():
    mu, sigma = ops.channel_instance_stats(Tensor(np.full((2, 3, 4, 5), 0.7)))
    np.testing.assert_allclose(mu.data, 0.7)
    np.testing.assert_allclose(sigma.data, np.sqrt(1e-5))


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    g = backward(ops.sum(x * x), [x])
    assert g[x].tolist() == [2.0, 4.0]


def test_unused_leaf_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    p = Tensor(np.ones((2, 2)), requires_grad=True)
    g = backward(ops.sum(ops.square(x)), [x, p])
    assert np.array_equal(g[p], np.zeros((2, 2)))


def test_second_backward_raises():
    x = Tensor([3.0], requires_grad=True)
    loss = ops.sum(x * x)
    backward(loss, [x])
    with pytest.raises(GraphError):
        backward(loss, [x])


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0, [x])


def test_non_finite_result_raises():
    with pytest.raises(NonFiniteError):
        ops.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 4, 4, 3))), Tensor(np.ones((3, 3, 2, 1))))


def test_tensor_data_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(3, 4))

    def loss_a(x):
        return ops.sum(ops.exp(x * 0.3))

    def loss_b(x):
        return ops.sum(ops.tanh(ops.matmul(x, Tensor(np.ones((4, 2))))))

    x = Tensor(x0, requires_grad=True)
    together = backward(loss_a(x) + loss_b(x), [x])[x]
    x1, x2 = Tensor(x0, requires_grad=True), Tensor(x0, requires_grad=True)
    apart = backward(loss_a(x1), [x1])[x1] + backward(loss_b(x2), [x2])[x2]
    np.testing.assert_allclose(together, apart, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("cin", [3, 8, 10])
@pytest.mark.parametrize("h", [1, 4, 5])
def test_conv2d_matches_direct_loop(stride, cin, h):
    rng = np.random.default_rng(cin * 10 + h + stride)
    x = rng.normal(size=(2, h, 7, cin))
    w = rng.normal(size=(3, 3, cin, 4))
    b = rng.normal(size=4)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride).data
    np.testing.assert_allclose(got, conv_oracle(x, w, b, stride), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("cin", [3, 9])
@pytest.mark.parametrize("h", [1, 5])
def test_conv2d_gradients(stride, cin, h):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, h, 6, cin))
    w = rng.normal(size=(3, 3, cin, 2))
    b = rng.normal(size=2)
    proj = rng.normal(size=conv_oracle(x, w, b, stride).shape)
    args = [x, w, b]
    for which in range(3):
        def f(v, which=which):
            parts = [Tensor(a) for a in args]
            parts[which] = v
            return ops.sum(ops.conv2d(*parts, stride=stride) * proj)
        assert grad_check(f, args[which]) < 1e-6


SMOOTH_OPS = {
    "add": lambda x: ops.sum(ops.add(x, x * 2.0) * x),
    "mul": lambda x: ops.sum(ops.mul(x, ops.exp(x * 0.1))),
    "div": lambda x: ops.sum(ops.div(x, ops.square(x) + 1.0)),
    "matmul": lambda x: ops.sum(ops.square(ops.matmul(x, ops.transpose(x, (1, 0))))),
    "exp_log": lambda x: ops.sum(ops.log(ops.exp(x) + 1.0)),
    "sqrt": lambda x: ops.sum(ops.sqrt(ops.square(x) + 0.5)),
    "tanh": lambda x: ops.sum(ops.tanh(x) * x),
    "softmax": lambda x: ops.sum(ops.softmax(x) * np.arange(4.0)),
    "log_softmax": lambda x: ops.sum(ops.log_softmax(x, axis=0) * np.arange(12.0).reshape(3, 4)),
    "l2_normalize": lambda x: ops.sum(ops.l2_normalize(x) * np.linspace(-1, 1, 12).reshape(3, 4)),
    "mean_keepdims": lambda x: ops.sum(ops.square(x - ops.mean(x, axis=1, keepdims=True))),
    "getitem": lambda x: ops.sum(ops.square(x[1:, ::2])),
    "concat_repeat": lambda x: ops.sum(ops.square(ops.repeat(ops.concat([x, x * 3.0], axis=0), 2, axis=1))),
    "instance_stats": lambda x: ops.sum(ops.channel_instance_stats(ops.reshape(x, (1, 3, 2, 2)))[1]),
    "global_average_pool": lambda x: ops.sum(ops.square(ops.global_average_pool(ops.reshape(x, (2, 3, 1, 2))))),
}

KINKED_OPS = {
    "relu": lambda x: ops.sum(ops.relu(x) * np.arange(12.0).reshape(3, 4)),
    "abs": lambda x: ops.sum(ops.abs(x) * np.arange(12.0).reshape(3, 4)),
    "maximum": lambda x: ops.sum(ops.maximum(x, 0.2) * np.arange(12.0).reshape(3, 4)),
}


@pytest.mark.parametrize("name", sorted(SMOOTH_OPS) + sorted(KINKED_OPS))
def test_every_op_passes_grad_check_at_ten_points(name):
    f = {**SMOOTH_OPS, **KINKED_OPS}[name]
    err = grad_check_random(f, lambda r: r.normal(size=(3, 4)), np.random.default_rng(0), n_points=10)
    assert err < 1e-4


def test_grad_check_exact_for_quadratic():
    x = np.random.default_rng(1).normal(size=10)
    assert grad_check(lambda t: ops.sum(ops.square(t)), x) < 1e-6


def test_kink_distance_reports_relu_margin():
    assert kink_distance(lambda t: ops.sum(ops.relu(t)), np.array([0.5, -0.02, 3.0])) == pytest.approx(0.02)


def test_maximum_has_zero_gradient_below_floor():
    x = Tensor([0.1, 0.5], requires_grad=True)
    g = backward(ops.sum(ops.maximum(x, 0.3)), [x])[x]
    assert g.tolist() == [0.0, 1.0]


def test_adam_zero_gradient_leaves_params():
    params = {"w": np.array([1.0, -2.0])}
    new, _ = adam_step(params, {"w": np.zeros(2)}, AdamState(), 1e-3)
    assert np.array_equal(new["w"], params["w"])


def test_adam_first_step_moves_by_lr():
    new, state = adam_step({"p": np.array([0.0])}, {"p": np.array([1.0])}, AdamState(), 1e-3)
    assert new["p"][0] == pytest.approx(-1e-3, rel=1e-6)
    assert state.step == 1


def test_adam_minimizes_square():
    params, state = {"p": np.array([1.0])}, AdamState()
    for _ in range(5000):
        params, state = adam_step(params, {"p": 2.0 * params["p"]}, state, 1e-3)
        if abs(params["p"][0]) < 1e-3:
            break
    assert abs(params["p"][0]) < 1e-3


def test_adam_does_not_mutate_inputs():
    params = {"w": np.array([1.0])}
    grads = {"w": np.array([0.5])}
    state = AdamState()
    adam_step(params, grads, state, 0.1)
    assert params["w"][0] == 1.0 and state.step == 0 and state.m == {}


def test_repeated_reductions_are_bit_identical():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(64, 33))
    a = ops.mean(ops.l2_normalize(Tensor(x))).item()
    b = ops.mean(ops.l2_normalize(Tensor(x))).item()
    assert a == b


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_is_a_distribution(values):
    p = ops.softmax(Tensor(values)).data
    assert np.all(p >= 0) and abs(p.sum() - 1.0) < 1e-12
