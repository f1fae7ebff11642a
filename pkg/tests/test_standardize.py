import numpy as np
import pytest

from terminator.autograd import Parameter, grad_check
from terminator import autograd as ag
from terminator.standardize import StdConfig, batch_standardize, g_ibs, instance_standardize, z_score


def _x(shape=(4, 6, 3, 3), seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(loc=2.0, scale=3.0, size=shape)


def test_std_config_validates():
    with pytest.raises(ValueError):
        StdConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        StdConfig(groups=0)


def test_batch_standardize_per_channel_statistics():
    out = batch_standardize(_x()).numpy()
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    assert np.allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)


def test_instance_standardize_per_sample_statistics():
    out = instance_standardize(_x()).numpy()
    assert np.allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-10)
    assert np.allclose(out.var(axis=(2, 3)), 1.0, atol=1e-3)


def test_z_score_of_constant_is_zero():
    out = z_score(np.full((2, 3, 4), 5.0), (0, 2)).numpy()
    assert np.all(out == 0.0)


def test_z_score_on_1d_sequences():
    out = instance_standardize(_x((2, 3, 20))).numpy()
    assert np.allclose(out.mean(axis=2), 0.0, atol=1e-10)


def test_g_ibs_alternates_batch_and_instance_groups():
    x = _x((4, 8, 3, 3))
    out = g_ibs(x, groups=4).numpy()
    grouped = out.reshape(4, 4, 2, 3, 3)
    # even groups: one joint statistic over batch, group channels and space
    for g in (0, 2):
        assert np.isclose(grouped[:, g].mean(), 0.0, atol=1e-10)
        assert np.isclose(grouped[:, g].var(), 1.0, atol=1e-4)
    # odd groups: standardized separately per sample
    for g in (1, 3):
        assert np.allclose(grouped[:, g].mean(axis=(1, 2, 3)), 0.0, atol=1e-10)
        assert np.allclose(grouped[:, g].var(axis=(1, 2, 3)), 1.0, atol=1e-4)


def test_g_ibs_single_group_is_batch_over_all_channels():
    x = _x((3, 4, 2, 2))
    out = g_ibs(x, groups=1).numpy()
    expected = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
    assert np.allclose(out, expected)


def test_g_ibs_requires_divisible_groups():
    with pytest.raises(ValueError):
        g_ibs(_x((2, 6, 2, 2)), groups=4)


def test_g_ibs_gradients():
    x = Parameter("x", _x((3, 4, 2, 2)), component="fast")
    weights = np.random.default_rng(3).normal(size=x.shape)
    report = grad_check(lambda: ag.reduce_sum(ag.mul(g_ibs(x, 2), weights), keepdims=False), [x])
    assert report.passed, report.rows


def test_repeated_calls_are_bit_identical():
    x = _x()
    for op in (batch_standardize, instance_standardize, lambda v: g_ibs(v, 3)):
        assert np.array_equal(op(x).numpy(), op(x).numpy())


def test_small_epsilon_gives_exact_unit_variance():
    out = batch_standardize(_x(), eps=1e-12).numpy()
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-8)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1.0) < 1e-5)


def test_batch_standardize_commutes_with_sample_permutation():
    x = _x((5, 3, 4, 4))
    perm = np.random.default_rng(1).permutation(5)
    permuted = batch_standardize(x[perm]).numpy()
    restored = permuted[np.argsort(perm)]
    assert np.allclose(restored, batch_standardize(x).numpy(), atol=1e-12)


def test_instance_standardize_ignores_per_instance_affine_maps():
    x = _x((3, 4, 5, 5))
    rng = np.random.default_rng(2)
    scale = rng.uniform(0.5, 2.0, size=(3, 4, 1, 1))
    shift = rng.normal(scale=5.0, size=(3, 4, 1, 1))
    out = instance_standardize(scale * x + shift, eps=1e-12).numpy()
    assert np.allclose(out, instance_standardize(x, eps=1e-12).numpy(), atol=1e-8)


def test_g_ibs_of_constant_input_is_zero():
    out = g_ibs(np.full((2, 8, 3, 3), 4.0), groups=4).numpy()
    assert np.allclose(out, 0.0)
