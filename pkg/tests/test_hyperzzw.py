import time

import numpy as np
import pytest

from terminator import autograd as ag
from terminator.hyperzzw import (
    ContextKernel,
    global_hyperzzw,
    global_hyperzzw_1d,
    global_hyperzzw_2d,
    hyper_channel_interaction,
    hyper_interaction,
    local_hyperzzw,
)
from terminator.tensor import ShapeError


def _rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def test_global_2d_is_elementwise():
    z, k = _rand(2, 3, 4, 4), _rand(1, 3, 4, 4, seed=1)
    k_hat, out = global_hyperzzw_2d(z, k)
    assert np.allclose(k_hat.numpy(), z * k)
    assert np.allclose(out.numpy(), z * z * k)


def test_global_1d_is_circular_convolution_with_context_kernel():
    z, k = _rand(1, 2, 6), _rand(1, 2, 6, seed=1)
    k_hat, out = global_hyperzzw_1d(z, k)
    expected = np.zeros_like(z)
    for i in range(6):
        for j in range(6):
            expected[..., i] += z[..., j] * k_hat.numpy()[..., (i - j) % 6]
    assert np.allclose(out.numpy(), expected)


def test_global_dispatch_and_shape_checks():
    assert global_hyperzzw(_rand(2, 3, 5), _rand(1, 3, 5))[1].shape == (2, 3, 5)
    assert global_hyperzzw(_rand(2, 3, 4, 4), _rand(1, 3, 4, 4))[1].shape == (2, 3, 4, 4)
    with pytest.raises(ShapeError):
        global_hyperzzw_2d(_rand(2, 3, 4, 4), _rand(1, 3, 4, 5))
    with pytest.raises(ShapeError):
        global_hyperzzw_2d(_rand(2, 3, 4, 4), _rand(2, 3, 4, 4))
    with pytest.raises(ShapeError):
        global_hyperzzw(_rand(2, 3), _rand(1, 3))


def test_zero_input_gives_zero_context_kernel():
    k_hat, out = global_hyperzzw_2d(np.zeros((1, 2, 3, 3)), _rand(1, 2, 3, 3))
    assert np.all(k_hat.numpy() == 0.0)
    assert np.all(out.numpy() == 0.0)


def test_context_kernel_exposes_shape():
    ctx = ContextKernel(ag.constant(np.zeros((2, 3, 4, 4))), block=1, step=5)
    assert ctx.shape == (2, 3, 4, 4)


def test_local_hyperzzw_center_tap_identity():
    z = _rand(2, 3, 5, 5)
    k = np.zeros((3, 1, 3, 3))
    k[:, 0, 1, 1] = 2.0
    assert np.allclose(local_hyperzzw(z, k).numpy(), 2.0 * z)


def test_hyper_channel_interaction_zero_weights_halves():
    x = _rand(2, 3, 4, 4)
    out = hyper_channel_interaction(x, np.zeros((3, 1, 1))).numpy()
    assert np.allclose(out, 0.5 * x)
    with pytest.raises(ShapeError):
        hyper_channel_interaction(x, np.zeros((4, 1, 1)))


def test_hyper_interaction_gates_pixelwise():
    x, h = _rand(2, 3, 4, 4), _rand(2, 3, 4, 4, seed=1)
    w_c, w_s = _rand(3, 1, 1, seed=2), _rand(1, 4, 4, seed=3)
    out = hyper_interaction(x, h, w_c, w_s).numpy()
    z_c = h.mean(axis=(2, 3), keepdims=True)
    z_s = h.mean(axis=1, keepdims=True)
    gate = 1.0 / (1.0 + np.exp(-(z_c * w_c * z_c) * (z_s * w_s * z_s)))
    assert np.allclose(out, x * gate)


def test_hyper_interaction_1d_and_shape_checks():
    x = _rand(2, 3, 7)
    assert hyper_interaction(x, x, _rand(3, 1), _rand(1, 7)).shape == (2, 3, 7)
    with pytest.raises(ShapeError):
        hyper_interaction(x, _rand(2, 3, 6), _rand(3, 1), _rand(1, 7))
    with pytest.raises(ShapeError):
        hyper_interaction(x, x, _rand(3, 1), _rand(1, 6))


def test_unit_kernel_makes_context_equal_input():
    z = _rand(2, 3, 4, 4)
    k_hat, _ = global_hyperzzw_2d(z, np.ones((1, 3, 4, 4)))
    assert np.array_equal(k_hat.numpy(), z)


def test_global_2d_output_is_even_in_input():
    z, k = _rand(2, 3, 4, 4), _rand(1, 3, 4, 4, seed=1)
    assert np.array_equal(global_hyperzzw_2d(z, k)[1].numpy(), global_hyperzzw_2d(-z, k)[1].numpy())


def test_global_1d_delta_context_kernel_is_identity():
    z = _rand(1, 3, 9)
    z[..., 0] = np.array([1.5, -2.0, 0.5])
    k = np.zeros((1, 3, 9))
    k[..., 0] = 1.0 / z[..., 0]
    k_hat, out = global_hyperzzw_1d(z, k)
    delta = np.zeros((1, 3, 9))
    delta[..., 0] = 1.0
    assert np.allclose(k_hat.numpy(), delta)
    assert np.allclose(out.numpy(), z, atol=1e-12)


def _best_time(fn, repeats=7):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def test_global_1d_cost_grows_far_below_quadratic():
    times = {}
    for length in (1024, 8192):
        z, k = _rand(2, 16, length), _rand(1, 16, length, seed=1)
        global_hyperzzw_1d(z, k)
        times[length] = _best_time(lambda: global_hyperzzw_1d(z, k))
    # 8x the length: about 10x for L log L, 64x for a quadratic path
    assert times[8192] / times[1024] < 32.0
