import numpy as np
import pytest

from ansguard.errors import ConfigError, NonFiniteError, ShapeError, TapeError, TargetError
from ansguard.models import build
from ansguard.tensor import (
    SGD,
    Tensor,
    avgpool2d,
    backward,
    batchnorm,
    conv2d,
    conv_output_extent,
    grad,
    linear,
    log_softmax,
    maxpool2d,
    no_grad,
    relu,
    sgd_step,
    softmax,
    softmax_cross_entropy,
    square,
)

H = 1e-6


def _naive_conv(x, w, stride, padding):
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, hh, ww = x.shape
    c_out, _, k, _ = w.shape
    h_out = (hh - k) // stride + 1
    w_out = (ww - k) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out))
    for b in range(n):
        for o in range(c_out):
            for i in range(h_out):
                for j in range(w_out):
                    patch = x[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


def test_broadcast_add_reduces_gradient_to_operand_shape():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.arange(3.0), requires_grad=True)
    backward((a + b).sum())
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
    np.testing.assert_array_equal(b.grad, np.full(3, 2.0))


def test_mul_gradient_is_other_operand():
    a = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    b = Tensor(np.array([4.0, 5.0, 6.0]), requires_grad=True)
    backward((a * b).sum())
    np.testing.assert_array_equal(a.grad, b.data)
    np.testing.assert_array_equal(b.grad, a.data)


def test_square_gradient_is_twice_input():
    a = Tensor(np.array([1.5, -2.0, 0.0]), requires_grad=True)
    out = square(a)
    np.testing.assert_array_equal(out.data, [2.25, 4.0, 0.0])
    backward(out.sum())
    np.testing.assert_array_equal(a.grad, [3.0, -4.0, 0.0])


def test_log_softmax_is_shift_invariant_and_normalized():
    logits = np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 0.0]])
    out = log_softmax(logits)
    np.testing.assert_allclose(out[0], log_softmax(logits[:1] + 50.0)[0])
    np.testing.assert_allclose(np.exp(out).sum(axis=1), [1.0, 1.0])
    np.testing.assert_allclose(softmax(logits)[1, :2], [0.5, 0.5])
    assert np.all(np.isfinite(out[1, :2]))


def test_gradients_accumulate_across_backward_calls():
    a = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    backward((a * 3.0).sum())
    backward((a * 3.0).sum())
    np.testing.assert_array_equal(a.grad, [6.0, 6.0])


def test_linear_rejects_mismatched_width():
    with pytest.raises(ShapeError):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_conv_output_extent():
    assert conv_output_extent(32, 3, 1, 1) == 32
    assert conv_output_extent(28, 5, 1, 0) == 24
    with pytest.raises(ConfigError):
        conv_output_extent(5, 2, 2, 0)
    assert conv_output_extent(5, 2, 2, 0, floor=True) == 2
    with pytest.raises(ConfigError):
        conv_output_extent(2, 5, 1, 0)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_direct_loops(rng, stride, padding):
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, _naive_conv(x, w, stride, padding), rtol=1e-10, atol=1e-12)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((4, 3, 3, 3))))


def test_conv2d_input_gradient_matches_finite_differences(rng):
    x = rng.normal(size=(1, 2, 6, 6))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    upstream = rng.normal(size=(1, 3, 3, 3))

    def value(arr):
        return float(np.sum(conv2d(Tensor(arr), w, stride=2, padding=1, floor=True).data * upstream))

    xt = Tensor(x.copy(), requires_grad=True)
    out = conv2d(xt, w, stride=2, padding=1, floor=True)
    (g,) = grad((out * Tensor(upstream)).sum(), [xt])
    numeric = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += H
        down[idx] -= H
        numeric[idx] = (value(up) - value(down)) / (2 * H)
    np.testing.assert_allclose(g, numeric, rtol=1e-5, atol=1e-7)


def test_maxpool_routes_gradient_to_window_maximum():
    x = Tensor(np.array([[[[1.0, 5.0], [2.0, 3.0]]]]), requires_grad=True)
    out = maxpool2d(x, 2)
    assert out.data.reshape(-1).tolist() == [5.0]
    backward(out.sum())
    np.testing.assert_array_equal(x.grad, [[[[0.0, 1.0], [0.0, 0.0]]]])


def test_avgpool_averages_windows():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    out = avgpool2d(x, 2)
    np.testing.assert_array_equal(out.data.reshape(-1), [2.5, 4.5, 10.5, 12.5])


def test_pool_rejects_window_larger_than_input():
    with pytest.raises(ConfigError):
        maxpool2d(Tensor(np.zeros((1, 1, 2, 2))), 3)


def test_batchnorm_training_updates_running_statistics(rng):
    x = Tensor(rng.normal(loc=3.0, scale=2.0, size=(8, 2, 4, 4)))
    gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
    mean, var = np.zeros(2), np.ones(2)
    out = batchnorm(x, gamma, beta, mean, var, training=True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(mean, 0.1 * x.data.mean(axis=(0, 2, 3)))
    assert np.all(var > 1.0)


def test_batchnorm_eval_uses_stored_statistics():
    x = Tensor(np.full((1, 1, 2, 2), 5.0))
    out = batchnorm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), np.array([1.0]), np.array([4.0]), eps=0.0)
    np.testing.assert_allclose(out.data, 2.0)


def test_cross_entropy_value_and_target_range():
    logits = Tensor(np.log(np.array([[0.25, 0.75], [0.5, 0.5]])))
    loss = softmax_cross_entropy(logits, [1, 0])
    assert loss.item() == pytest.approx(-(np.log(0.75) + np.log(0.5)) / 2)
    with pytest.raises(TargetError):
        softmax_cross_entropy(logits, [2, 0])
    with pytest.raises(ShapeError):
        softmax_cross_entropy(logits, [0])


def test_backward_twice_is_a_tape_error():
    a = Tensor(np.ones(3), requires_grad=True)
    loss = (a * 2.0).sum()
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)


def test_backward_needs_scalar_on_tape():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(TapeError):
        backward(a * 2.0)
    with pytest.raises(TapeError):
        backward(Tensor(np.ones(3)).sum())


def test_grad_leaves_grad_fields_untouched():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (g,) = grad((a * a).sum(), [a])
    np.testing.assert_array_equal(g, [2.0, 4.0])
    assert a.grad is None


def test_grad_of_intermediate_node():
    a = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    hidden = relu(a * 3.0)
    (g,) = grad(hidden.sum(), [hidden])
    np.testing.assert_array_equal(g, [1.0, 1.0])


def test_no_grad_records_nothing():
    a = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        out = a * 2.0
    assert not out.requires_grad
    assert (a * 2.0).requires_grad


def test_sgd_rejects_non_finite_gradients_without_updating():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NonFiniteError):
        sgd_step([p], [np.array([1.0, np.nan, 0.0])], lr=0.1)
    np.testing.assert_array_equal(p.data, np.ones(3))


def test_sgd_zero_learning_rate_is_a_no_op():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    sgd_step([p], [np.array([5.0, 5.0])], lr=0.0)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_sgd_momentum_needs_velocity():
    p = Tensor(np.ones(1), requires_grad=True)
    with pytest.raises(ConfigError):
        sgd_step([p], [np.ones(1)], lr=0.1, momentum=0.9)


def test_sgd_momentum_matches_hand_computation():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([p], lr=0.5, momentum=0.9)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    # v1 = 1, v2 = 0.9 + 1
    assert p.data[0] == pytest.approx(1.0 - 0.5 * 1.0 - 0.5 * 1.9)


def _loss_value(model, x, y):
    with no_grad():
        return float(softmax_cross_entropy(model.forward(x), y, "sum").data)


@pytest.mark.parametrize("seed", range(5))
def test_autodiff_matches_central_differences(seed):
    model = build("tiny_cnn", classes=3, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (4, 1, 8, 8))
    y = rng.integers(0, 3, 4)
    backward(softmax_cross_entropy(model.forward(x), y, "sum"))
    params = model.parameters()
    mismatches = 0
    for _ in range(100):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[idx])
        original = p.data[idx]
        p.data[idx] = original + H
        up = _loss_value(model, x, y)
        p.data[idx] = original - H
        down = _loss_value(model, x, y)
        p.data[idx] = original
        numeric = (up - down) / (2 * H)
        if abs(analytic - numeric) > 1e-4 * max(abs(analytic), abs(numeric)) + 1e-7:
            mismatches += 1
    # a perturbation can straddle a ReLU kink
    assert mismatches <= 1
