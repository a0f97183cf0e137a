import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import correlate2d

from dynconv.tensor import (
    BatchNormParams,
    ConfigurationError,
    Conv1x1Params,
    DepthwiseParams,
    add,
    batchnorm,
    conv1x1,
    conv3x3,
    conv3x3_backward,
    depthwise3x3_backward,
    depthwise3x3_dense,
    relu,
    relu6,
)
from oracles import central_difference, naive_conv1x1, naive_conv3x3, naive_depthwise3x3, rel_err


def test_conv1x1_identity_is_exact():
    x = np.random.default_rng(0).standard_normal((2, 5, 4, 3)).astype(np.float32)
    out = conv1x1(x, Conv1x1Params(np.eye(5, dtype=np.float32)))
    assert np.array_equal(out, x)


def test_conv1x1_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 4, 5))
    w, b = rng.standard_normal((6, 3)), rng.standard_normal(6)
    np.testing.assert_allclose(conv1x1(x, Conv1x1Params(w, b)), naive_conv1x1(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv1x1_channel_mismatch():
    with pytest.raises(ConfigurationError):
        conv1x1(np.zeros((1, 4, 2, 2)), Conv1x1Params(np.zeros((3, 5))))


def test_depthwise_center_tap_is_identity():
    x = np.random.default_rng(2).standard_normal((2, 4, 6, 5)).astype(np.float32)
    k = np.zeros((4, 3, 3), np.float32)
    k[:, 1, 1] = 1
    assert np.array_equal(depthwise3x3_dense(x, DepthwiseParams(k)), x)


def test_depthwise_ones_on_ones_counts_neighbours():
    out = depthwise3x3_dense(np.ones((1, 1, 3, 3), np.float32), DepthwiseParams(np.ones((1, 3, 3), np.float32)))
    np.testing.assert_array_equal(out[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
def test_depthwise_matches_correlate2d(n, c, h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, w))
    k = rng.standard_normal((c, 3, 3))
    out = depthwise3x3_dense(x, DepthwiseParams(k))
    ref = np.stack([np.stack([correlate2d(x[i, j], k[j], mode="same") for j in range(c)]) for i in range(n)])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_depthwise_matches_loop_oracle_float32():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 7, 5)).astype(np.float32)
    k = rng.standard_normal((3, 3, 3)).astype(np.float32)
    assert rel_err(depthwise3x3_dense(x, DepthwiseParams(k)), naive_depthwise3x3(x, k)) < 1e-6


def test_depthwise_bad_kernel_shape():
    with pytest.raises(ConfigurationError):
        DepthwiseParams(np.zeros((2, 5, 5)))


def test_depthwise_backward_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 2, 5, 4))
    k = rng.standard_normal((2, 3, 3))
    gy = rng.standard_normal(x.shape)
    dx, dk = depthwise3x3_backward(x, k, gy)
    f = lambda: float((depthwise3x3_dense(x, DepthwiseParams(k)) * gy).sum())
    ndx, _ = central_difference(f, x, 1e-6)
    ndk, _ = central_difference(f, k, 1e-6)
    assert rel_err(dx, ndx) < 1e-7
    assert rel_err(dk, ndk) < 1e-7


@pytest.mark.parametrize("stride", [1, 2])
def test_conv3x3_matches_loop_oracle(stride):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 2, 7, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    out = conv3x3(x, w, stride=stride)
    assert out.shape == (2, 3, (7 - 1) // stride + 1, (6 - 1) // stride + 1)
    np.testing.assert_allclose(out, naive_conv3x3(x, w, stride), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv3x3_backward_finite_differences(stride):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    gy = rng.standard_normal(conv3x3(x, w, stride=stride).shape)
    dx, dw = conv3x3_backward(x, w, gy, stride)
    f = lambda: float((conv3x3(x, w, stride=stride) * gy).sum())
    assert rel_err(dx, central_difference(f, x, 1e-6)[0]) < 1e-7
    assert rel_err(dw, central_difference(f, w, 1e-6)[0]) < 1e-7


def test_batchnorm_inference_formula():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 4, 4))
    p = BatchNormParams(rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3),
                        rng.random(3) + 0.5)
    ref = ((x - p.running_mean[:, None, None]) / np.sqrt(p.running_var[:, None, None] + 1e-5)
           * p.gamma[:, None, None] + p.beta[:, None, None])
    np.testing.assert_allclose(batchnorm(x, p), ref, rtol=1e-12, atol=1e-12)


def test_batchnorm_training_stats_and_running_update():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, 2, 3, 3)) * 3 + 1
    p = BatchNormParams.identity(2, dtype=np.float64)
    out = batchnorm(x, p, training=True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), x.var(axis=(0, 2, 3)) / (x.var(axis=(0, 2, 3)) + 1e-5))
    np.testing.assert_allclose(p.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batchnorm_rejects_inconsistent_params():
    with pytest.raises(ConfigurationError):
        BatchNormParams(np.ones(2), np.zeros(3), np.zeros(2), np.ones(2))
    with pytest.raises(ConfigurationError):
        BatchNormParams.identity(2, epsilon=0.0)


def test_activations_and_add():
    x = np.array([-1.0, 0.0, 3.0, 7.0])
    np.testing.assert_array_equal(relu(x), [0, 0, 3, 7])
    np.testing.assert_array_equal(relu6(x), [0, 0, 3, 6])
    with pytest.raises(ConfigurationError):
        add(np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2, 3)))


def test_float32_preserved():
    x = np.ones((1, 2, 3, 3), np.float32)
    assert conv1x1(x, Conv1x1Params(np.ones((2, 2)))).dtype == np.float32
    assert depthwise3x3_dense(x, DepthwiseParams(np.ones((2, 3, 3), np.float32))).dtype == np.float32
