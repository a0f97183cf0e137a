"""Dense NCHW tensor primitives.

Activations are plain ``numpy`` arrays of shape ``(N, C, H, W)``. Functions
preserve the dtype of their input; models default to float32.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels

DTYPE = np.float32


class ConfigurationError(ValueError):
    """Raised when shapes or settings are inconsistent."""


def check_tensor4d(x, name: str = "x") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ConfigurationError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ConfigurationError(f"{name} has an empty dimension: {x.shape}")
    return x


@dataclass
class Conv1x1Params:
    weight: np.ndarray  # (C_out, C_in)
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ConfigurationError(f"1x1 weight must be (C_out, C_in), got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError("1x1 bias length must equal C_out")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class DepthwiseParams:
    weight: np.ndarray  # (C, 3, 3)
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weight.ndim != 3 or self.weight.shape[1:] != (3, 3):
            raise ConfigurationError(f"depthwise kernel must be (C, 3, 3), got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError("depthwise bias length must equal C")

    @property
    def channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        C = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == C):
            raise ConfigurationError("batchnorm parameter shapes disagree")
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if np.any(self.running_var < 0):
            raise ConfigurationError("running_var must be non-negative")

    @classmethod
    def identity(cls, channels: int, dtype=DTYPE, **kwargs) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kwargs,
        )

    def folded(self):
        """Per-channel ``(scale, shift)`` equivalent to inference-mode BN."""
        scale = self.gamma / np.sqrt(self.running_var + self.epsilon)
        shift = self.beta - self.running_mean * scale
        return scale.astype(self.gamma.dtype), shift.astype(self.gamma.dtype)


def conv1x1(x: np.ndarray, p: Conv1x1Params) -> np.ndarray:
    x = check_tensor4d(x)
    N, C, H, W = x.shape
    if C != p.in_channels:
        raise ConfigurationError(f"conv1x1 expects {p.in_channels} input channels, got {C}")
    out = np.matmul(p.weight.astype(x.dtype, copy=False), x.reshape(N, C, H * W))
    out = out.reshape(N, p.out_channels, H, W)
    if p.bias is not None:
        out += p.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return out


def depthwise3x3_dense(x: np.ndarray, p: DepthwiseParams) -> np.ndarray:
    """Per-channel 3x3 cross-correlation, stride 1, zero padding 1."""
    x = check_tensor4d(x)
    if x.shape[1] != p.channels:
        raise ConfigurationError(f"depthwise expects {p.channels} channels, got {x.shape[1]}")
    x = np.ascontiguousarray(x)
    out = np.zeros_like(x)
    _kernels.dw_forward(x, np.ascontiguousarray(p.weight, dtype=x.dtype), out)
    if p.bias is not None:
        out += p.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return out


def depthwise3x3_backward(x, weight, gy):
    """Gradients ``(dx, dweight)`` of the biasless depthwise convolution."""
    gy = np.ascontiguousarray(gy)
    dx = np.zeros_like(gy)
    _kernels.dw_backward_input(gy, np.ascontiguousarray(weight, dtype=gy.dtype), dx)
    dw = np.zeros(weight.shape, dtype=gy.dtype)
    _kernels.dw_backward_weight(np.ascontiguousarray(x), gy, dw)
    return dx, dw


def _im2col3x3(x: np.ndarray, stride: int):
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * 9)
    return cols, Ho, Wo


def conv3x3(x: np.ndarray, weight: np.ndarray, bias=None, stride: int = 1) -> np.ndarray:
    """Full 3x3 convolution with zero padding 1; used for the dense stem only."""
    x = check_tensor4d(x)
    Cout, Cin = weight.shape[:2]
    if weight.shape[2:] != (3, 3) or x.shape[1] != Cin:
        raise ConfigurationError(f"conv3x3 weight {weight.shape} incompatible with input {x.shape}")
    N = x.shape[0]
    cols, Ho, Wo = _im2col3x3(x, stride)
    out = cols @ weight.reshape(Cout, Cin * 9).astype(x.dtype, copy=False).T
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.reshape(N, Ho, Wo, Cout).transpose(0, 3, 1, 2))


def conv3x3_backward(x, weight, gy, stride: int = 1):
    N, Cin, H, W = x.shape
    Cout = weight.shape[0]
    cols, Ho, Wo = _im2col3x3(x, stride)
    gflat = gy.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, Cout)
    dweight = (gflat.T @ cols).reshape(weight.shape)
    dcols = (gflat @ weight.reshape(Cout, Cin * 9)).reshape(N, Ho, Wo, Cin, 3, 3)
    dxp = np.zeros((N, Cin, H + 2, W + 2), dtype=gy.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                dcols[..., i, j].transpose(0, 3, 1, 2)
            )
    return dxp[:, :, 1:-1, 1:-1], dweight


def batchnorm(x: np.ndarray, p: BatchNormParams, training: bool = False) -> np.ndarray:
    """Batch normalisation over (N, H, W).

    In training mode the batch statistics normalise the input and the running
    statistics are updated in place with ``p.momentum`` (unbiased variance).
    """
    x = check_tensor4d(x)
    if x.shape[1] != p.gamma.shape[0]:
        raise ConfigurationError(f"batchnorm expects {p.gamma.shape[0]} channels, got {x.shape[1]}")
    if not training:
        scale, shift = p.folded()
        return x * scale.astype(x.dtype)[None, :, None, None] + shift.astype(x.dtype)[None, :, None, None]
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    count = x.size // x.shape[1]
    update_running_stats(p, mean, var, count)
    inv = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    return xhat * p.gamma[None, :, None, None] + p.beta[None, :, None, None]


def update_running_stats(p: BatchNormParams, mean, var, count: int) -> None:
    unbiased = var * (count / max(count - 1, 1))
    m = p.momentum
    p.running_mean[...] = (1 - m) * p.running_mean + m * mean
    p.running_var[...] = (1 - m) * p.running_var + m * unbiased


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu6(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0, 6)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ConfigurationError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


ACTIVATIONS = {"identity": lambda x: x, "relu": relu, "relu6": relu6}
