"""Mask units and the binary Gumbel-Softmax gate.

Soft masks are ``(N, H, W)`` arrays of real logits; binary masks are boolean
arrays of the same shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .tensor import ConfigurationError, Conv1x1Params, check_tensor4d, conv1x1

MASK_UNIT_KINDS = ("conv1x1", "squeeze")
UNIFORM_CLAMP = 1e-7


@dataclass
class GumbelConfig:
    temperature: float = 1.0
    noise_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigurationError("Gumbel temperature must be positive")


@dataclass
class MaskUnitSpec:
    kind: str = "conv1x1"
    in_channels: int = 16

    def __post_init__(self):
        if self.kind not in MASK_UNIT_KINDS:
            raise ConfigurationError(f"mask unit kind must be one of {MASK_UNIT_KINDS}, got {self.kind!r}")


@dataclass
class MaskUnitParams:
    """Local 1x1 branch (``weight``, ``bias``) plus the squeeze branch.

    The squeeze branch maps spatially averaged features to one logit that is
    broadcast over the map; it is ignored by ``conv1x1`` units.
    """
    weight: np.ndarray  # (1, C)
    bias: np.ndarray  # (1,)
    fc_weight: Optional[np.ndarray] = None  # (1, C)
    fc_bias: Optional[np.ndarray] = None  # (1,)

    @classmethod
    def init(cls, spec: MaskUnitSpec, rng: np.random.Generator, bias: float = 1.0, dtype=np.float32):
        C = spec.in_channels
        std = math.sqrt(2.0 / C)
        p = cls(weight=(rng.standard_normal((1, C)) * std).astype(dtype), bias=np.full(1, bias, dtype))
        if spec.kind == "squeeze":
            p.fc_weight = (rng.standard_normal((1, C)) * std).astype(dtype)
            p.fc_bias = np.zeros(1, dtype)
        return p

    def named(self, prefix: str):
        out = [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]
        if self.fc_weight is not None:
            out += [(prefix + "fc_weight", self.fc_weight), (prefix + "fc_bias", self.fc_bias)]
        return out


def mask_unit_forward(x: np.ndarray, spec: MaskUnitSpec, params: MaskUnitParams) -> np.ndarray:
    """Soft gating logits of shape (N, H, W)."""
    x = check_tensor4d(x)
    if x.shape[1] != spec.in_channels:
        raise ConfigurationError(f"mask unit expects {spec.in_channels} channels, got {x.shape[1]}")
    m = conv1x1(x, Conv1x1Params(params.weight, params.bias))[:, 0]
    if spec.kind == "squeeze":
        pooled = x.mean(axis=(2, 3))
        m = m + (pooled @ params.fc_weight.T + params.fc_bias)[:, :, None]
    return m


def mask_unit_traced(x: ad.Var, spec: MaskUnitSpec, params: MaskUnitParams, bind) -> ad.Var:
    """Differentiable mask unit returning logits of shape (N, 1, H, W)."""
    m = ad.conv1x1(x, bind(params.weight), bind(params.bias))
    if spec.kind == "squeeze":
        g = ad.linear(ad.global_avg_pool(x), bind(params.fc_weight), bind(params.fc_bias))
        m = m + _as_map(g)
    return m


def _as_map(g: ad.Var) -> ad.Var:
    # (N, 1) -> (N, 1, 1, 1) so it broadcasts over the spatial grid
    v = g.value.reshape(g.shape[0], 1, 1, 1)
    return ad._op(v, (g,), lambda grad: (grad.reshape(g.shape),))


def gumbel_soft(m, g1, g2, tau):
    """Relaxed execution probability ``sigmoid((m + g1 - g2) / tau)``."""
    return 1.0 / (1.0 + np.exp(-(np.asarray(m) + g1 - g2) / tau))


def gumbel_softmax_two_class(m, g1, g2, tau):
    """Two-class Gumbel-Softmax with ``pi = (sigmoid(m), 1 - sigmoid(m))``; first class."""
    m = np.asarray(m, dtype=np.float64)
    log_pi1 = -np.logaddexp(0.0, -m)
    log_pi2 = -np.logaddexp(0.0, m)
    a = (log_pi1 + g1) / tau
    b = (log_pi2 + g2) / tau
    mx = np.maximum(a, b)
    ea, eb = np.exp(a - mx), np.exp(b - mx)
    return ea / (ea + eb)


def sample_gumbel(rng: np.random.Generator, size=None):
    """Gumbel(0, 1) samples ``-log(-log(u))`` with ``u`` clamped away from 0 and 1."""
    u = np.clip(rng.random(size), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(u))


def _noise(shape, cfg: GumbelConfig, rng, dtype):
    if not cfg.noise_enabled:
        return None
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return (sample_gumbel(rng, shape) - sample_gumbel(rng, shape)).astype(dtype)


def gate_forward(soft: np.ndarray, cfg: GumbelConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Hard execution mask. Without noise this is the comparison ``m > 0``."""
    soft = np.asarray(soft)
    diff = _noise(soft.shape, cfg, rng, soft.dtype)
    if diff is None:
        return soft > 0
    return (soft + diff) / cfg.temperature > 0


def gate_traced(m: ad.Var, cfg: GumbelConfig, rng: Optional[np.random.Generator] = None) -> ad.Var:
    """Straight-through gate: hard decisions forward, soft-sample gradient backward.

    The backward pass differentiates ``sigmoid((m + g1 - g2) / tau)`` using the
    same noise draw that produced the forward decision.
    """
    diff = _noise(m.shape, cfg, rng, m.value.dtype)
    logits = m.value if diff is None else m.value + diff
    z = (logits / cfg.temperature > 0).astype(m.value.dtype)
    tau = cfg.temperature

    def bw(g):
        with np.errstate(over="ignore"):  # exp overflow -> y = 0, the correct limit
            y = 1.0 / (1.0 + np.exp(-logits / tau))
        return (g * (y * (1 - y) / tau).astype(g.dtype),)

    return ad._op(z, (m,), bw)


def temperature_at(epoch: int, start: float, end: float, anneal_epochs: int) -> float:
    """Linear temperature schedule from ``start`` to ``end`` over ``anneal_epochs``."""
    if anneal_epochs <= 1:
        return end
    t = min(max(epoch / (anneal_epochs - 1), 0.0), 1.0)
    return start + (end - start) * t


def noise_enabled_at(epoch: int, epochs: int, off_fraction: float = 0.2) -> bool:
    """Gumbel noise is switched off for the final ``off_fraction`` of epochs."""
    return epoch < epochs - int(round(off_fraction * epochs))
