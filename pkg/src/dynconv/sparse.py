"""Gated inverted-residual blocks and their gather/scatter inference path."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels
from . import autodiff as ad
from .gating import (
    GumbelConfig,
    MaskUnitParams,
    MaskUnitSpec,
    gate_forward,
    gate_traced,
    mask_unit_forward,
    mask_unit_traced,
)
from .tensor import (
    ACTIVATIONS,
    DTYPE,
    BatchNormParams,
    ConfigurationError,
    Conv1x1Params,
    DepthwiseParams,
    check_tensor4d,
    conv1x1,
    depthwise3x3_dense,
)

OUT_OF_BOUNDS = _kernels.OUT_OF_BOUNDS
INACTIVE = _kernels.INACTIVE
RESIDUAL_ACTIVATIONS = ("identity", "relu")


@dataclass
class GatherIndex:
    """Row <-> coordinate bookkeeping for one (batch-wide) mask.

    ``forward[p]`` is the ``(n, h, w)`` of gathered row ``p``; ``inverse`` maps
    coordinates back to rows (``INACTIVE`` elsewhere); ``neighbors[p, k]`` is
    the row of the k-th 3x3 tap in row-major order, ``OUT_OF_BOUNDS`` for
    padding and ``INACTIVE`` for in-image taps missing from the mask.
    """
    forward: np.ndarray  # (P, 3) int64
    inverse: np.ndarray  # (N, H, W) int64
    neighbors: np.ndarray  # (P, 9) int64

    @property
    def size(self) -> int:
        return self.forward.shape[0]

    @property
    def grid_shape(self):
        return self.inverse.shape


@dataclass
class GatedBlockSpec:
    channels: int
    expansion_channels: Optional[int] = None
    mask_unit: str = "conv1x1"
    gated: bool = True
    residual_activation: str = "identity"

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigurationError("channels must be positive")
        if self.expansion_channels is None:
            self.expansion_channels = 6 * self.channels
        if self.expansion_channels < self.channels:
            raise ConfigurationError("expansion channels must be >= base channels")
        if self.residual_activation not in RESIDUAL_ACTIVATIONS:
            raise ConfigurationError(f"residual activation must be one of {RESIDUAL_ACTIVATIONS}")
        MaskUnitSpec(self.mask_unit, self.channels)

    @property
    def mask_spec(self) -> MaskUnitSpec:
        return MaskUnitSpec(self.mask_unit, self.channels)


@dataclass
class BlockParams:
    expand: Conv1x1Params
    bn1: BatchNormParams
    dw: DepthwiseParams
    bn2: BatchNormParams
    project: Conv1x1Params
    bn3: BatchNormParams
    mask: Optional[MaskUnitParams] = None

    @classmethod
    def init(cls, spec: GatedBlockSpec, rng: np.random.Generator, mask_bias: float = 1.0, dtype=DTYPE):
        C, E = spec.channels, spec.expansion_channels

        def kaiming(shape, fan_in):
            return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)

        return cls(
            expand=Conv1x1Params(kaiming((E, C), C)),
            bn1=BatchNormParams.identity(E, dtype),
            dw=DepthwiseParams(kaiming((E, 3, 3), 9)),
            bn2=BatchNormParams.identity(E, dtype),
            project=Conv1x1Params(kaiming((C, E), E)),
            bn3=BatchNormParams.identity(C, dtype),
            mask=MaskUnitParams.init(spec.mask_spec, rng, mask_bias, dtype) if spec.gated else None,
        )

    def named_parameters(self, prefix: str = ""):
        out = [
            (prefix + "expand.weight", self.expand.weight),
            (prefix + "bn1.gamma", self.bn1.gamma), (prefix + "bn1.beta", self.bn1.beta),
            (prefix + "dw.weight", self.dw.weight),
            (prefix + "bn2.gamma", self.bn2.gamma), (prefix + "bn2.beta", self.bn2.beta),
            (prefix + "project.weight", self.project.weight),
            (prefix + "bn3.gamma", self.bn3.gamma), (prefix + "bn3.beta", self.bn3.beta),
        ]
        if self.mask is not None:
            out += self.mask.named(prefix + "mask.")
        return out

    def named_buffers(self, prefix: str = ""):
        out = []
        for key in ("bn1", "bn2", "bn3"):
            bn = getattr(self, key)
            out += [(f"{prefix}{key}.running_mean", bn.running_mean), (f"{prefix}{key}.running_var", bn.running_var)]
        return out


@dataclass
class BlockTimings:
    """Accumulated wall-clock seconds per sparse-inference stage.

    ``bookkeeping`` covers thresholding, dilation and index construction.
    ``macs`` counts the multiply-accumulates actually issued by the convolutions.
    """
    mask: float = 0.0
    bookkeeping: float = 0.0
    gather: float = 0.0
    residual: float = 0.0
    scatter: float = 0.0
    macs: int = 0

    @property
    def total(self) -> float:
        return self.mask + self.bookkeeping + self.gather + self.residual + self.scatter


# masks and indices -------------------------------------------------------------

def _check_mask(g) -> np.ndarray:
    g = np.asarray(g)
    if g.ndim != 3:
        raise ConfigurationError(f"mask must be (N, H, W), got shape {g.shape}")
    return g.astype(bool, copy=False)


def dilate_mask(g: np.ndarray) -> np.ndarray:
    """3x3 binary dilation per sample; pixels outside the image never activate."""
    g = _check_mask(g)
    N, H, W = g.shape
    padded = np.zeros((N, H + 2, W + 2), dtype=bool)
    padded[:, 1:-1, 1:-1] = g
    # separable: 3-wide OR along rows, then along columns
    rows = padded[:, :, :-2] | padded[:, :, 1:-1] | padded[:, :, 2:]
    return rows[:, :-2] | rows[:, 1:-1] | rows[:, 2:]


def build_gather_index(g: np.ndarray) -> GatherIndex:
    g = np.ascontiguousarray(_check_mask(g))
    P = int(g.sum())
    inverse = np.full(g.shape, INACTIVE, dtype=np.int64)
    coords = np.empty((P, 3), dtype=np.int64)
    neighbors = np.empty((P, 9), dtype=np.int64)
    _kernels.build_index(g, inverse, coords, neighbors)
    return GatherIndex(coords, inverse, neighbors)


def gather(x: np.ndarray, idx: GatherIndex) -> np.ndarray:
    """Copy active positions into a ``(P, C, 1, 1)`` tensor."""
    return gather_rows(x, idx)[:, :, None, None]


def gather_rows(x: np.ndarray, idx: GatherIndex) -> np.ndarray:
    x = check_tensor4d(x)
    if (x.shape[0],) + x.shape[2:] != idx.grid_shape:
        raise ConfigurationError(f"index built for grid {idx.grid_shape}, tensor is {x.shape}")
    out = np.empty((idx.size, x.shape[1]), dtype=x.dtype)
    _kernels.gather_rows(np.ascontiguousarray(x), idx.forward, out)
    return out


def scatter(t: np.ndarray, idx: GatherIndex, base: np.ndarray, accumulate: bool = False) -> np.ndarray:
    """Write (or add) row ``p`` of ``t`` to its source coordinate in a copy of ``base``."""
    out = np.array(base, copy=True)
    scatter_rows_(t.reshape(t.shape[0], int(np.prod(t.shape[1:]))), idx, out, accumulate)
    return out


def scatter_rows_(t: np.ndarray, idx: GatherIndex, out: np.ndarray, accumulate: bool = False) -> None:
    if t.shape[0] != idx.size:
        raise ConfigurationError(f"scatter got {t.shape[0]} rows for an index of {idx.size}")
    if t.shape[1] != out.shape[1]:
        raise ConfigurationError("scatter channel mismatch")
    _kernels.scatter_rows(np.ascontiguousarray(t, dtype=out.dtype), idx.forward, out, accumulate)


def depthwise3x3_gathered(t: np.ndarray, idx_dilated: GatherIndex, out_rows: np.ndarray,
                          p: DepthwiseParams) -> np.ndarray:
    """3x3 depthwise convolution evaluated on gathered rows.

    ``t`` holds rows of the dilated gather, either ``(P, C)`` or
    ``(P, C, 1, 1)``; ``out_rows`` selects the rows to produce. Output has the
    same trailing layout as ``t``.
    """
    four_d = t.ndim == 4
    t2 = np.ascontiguousarray(t.reshape(t.shape[0], int(np.prod(t.shape[1:]))))
    if t2.shape[0] != idx_dilated.size:
        raise ConfigurationError("gathered tensor does not match its index")
    if t2.shape[1] != p.channels:
        raise ConfigurationError(f"depthwise expects {p.channels} channels, got {t2.shape[1]}")
    out_rows = np.asarray(out_rows, dtype=np.int64)
    if out_rows.size and (out_rows.min() < 0 or out_rows.max() >= idx_dilated.size):
        raise ConfigurationError("out_rows must index rows of the dilated gather")
    taps = idx_dilated.neighbors[out_rows]
    if np.any(taps == INACTIVE):
        raise ConfigurationError("an output row reads a neighbour missing from the dilated gather")
    out = np.zeros((out_rows.size, t2.shape[1]), dtype=t2.dtype)
    wt = np.ascontiguousarray(p.weight.reshape(p.channels, 9).T, dtype=t2.dtype)
    _kernels.dw_gathered(t2, idx_dilated.neighbors, out_rows, wt, out)
    if p.bias is not None:
        out += p.bias
    return out[:, :, None, None] if four_d else out


def undilated_rows(g: np.ndarray, idx_dilated: GatherIndex) -> np.ndarray:
    """Rows of the dilated gather whose coordinates are active in ``g``."""
    f = idx_dilated.forward
    return np.flatnonzero(g[f[:, 0], f[:, 1], f[:, 2]])


# block forward ---------------------------------------------------------------

@dataclass
class BlockTrace:
    """Traced outputs of one block in dense (training) mode."""
    out: ad.Var
    gate: Optional[ad.Var] = None
    logits: Optional[ad.Var] = None


def block_forward_traced(x: ad.Var, spec: GatedBlockSpec, params: BlockParams, bind=ad.constant_binder,
                         cfg: Optional[GumbelConfig] = None, rng=None, bn_training: bool = False,
                         update_stats: bool = True, mask: Optional[np.ndarray] = None,
                         gate_fn: Callable = gate_traced) -> BlockTrace:
    """Dense masked residual ``r(F(x) * G + x)`` on the autodiff trace.

    ``mask`` forces ``G`` (shape (N, H, W)) and bypasses the mask unit.
    """
    if x.shape[1] != spec.channels:
        raise ConfigurationError(f"block expects {spec.channels} channels, got {x.shape[1]}")
    cfg = cfg or GumbelConfig(noise_enabled=False)

    def bn(h, p):
        return ad.batchnorm(h, bind(p.gamma), bind(p.beta), p, bn_training, update_stats)

    h = ad.relu6(bn(ad.conv1x1(x, bind(params.expand.weight)), params.bn1))
    h = ad.relu6(bn(ad.depthwise3x3(h, bind(params.dw.weight)), params.bn2))
    h = bn(ad.conv1x1(h, bind(params.project.weight)), params.bn3)

    logits = gate = None
    if mask is not None:
        gate = ad.Var(_check_mask(mask)[:, None].astype(x.value.dtype))
    elif spec.gated:
        logits = mask_unit_traced(x, spec.mask_spec, params.mask, bind)
        gate = gate_fn(logits, cfg, rng)
    if gate is not None:
        h = h * gate
    out = ad.activation(spec.residual_activation, h + x)
    return BlockTrace(out, gate, logits)


def block_forward(x: np.ndarray, spec: GatedBlockSpec, params: BlockParams,
                  cfg: Optional[GumbelConfig] = None, mode: str = "infer-sparse",
                  mask: Optional[np.ndarray] = None, rng=None, timings: Optional[BlockTimings] = None,
                  run_mask_unit: bool = False):
    """Run one block and return ``(output, execution mask, BlockBudget)``.

    ``train-dense`` evaluates the masked residual densely (BN in inference
    mode); ``infer-sparse`` gathers the dilated mask, runs the residual on rows
    and scatters the result onto the block input.
    """
    from .budget import block_budget

    x = check_tensor4d(x)
    if x.shape[1] != spec.channels:
        raise ConfigurationError(f"block expects {spec.channels} channels, got {x.shape[1]}")
    cfg = cfg or GumbelConfig(noise_enabled=False)
    N, _, H, W = x.shape
    if mode == "train-dense":
        tr = block_forward_traced(ad.Var(x), spec, params, cfg=cfg, rng=rng, mask=mask)
        g = np.ones((N, H, W), bool) if tr.gate is None else tr.gate.value[:, 0] > 0.5
        return tr.out.value, g, block_budget(spec, H, W, g)
    if mode == "infer-dense":
        return _block_dense_infer(x, spec, params), np.ones((N, H, W), bool), block_budget(spec, H, W, None)
    if mode != "infer-sparse":
        raise ConfigurationError(f"unknown block mode {mode!r}")
    if not spec.gated and mask is None:
        return _block_dense_infer(x, spec, params), np.ones((N, H, W), bool), block_budget(spec, H, W, None)
    out, g, _ = _block_sparse_infer(x, spec, params, cfg, mask, rng, timings, run_mask_unit)
    return out, g, block_budget(spec, H, W, g)


def _bn_act(h: np.ndarray, bn: BatchNormParams, act: bool) -> np.ndarray:
    scale, shift = bn.folded()
    h *= scale
    h += shift
    if act:
        np.clip(h, 0, 6, out=h)
    return h


def _block_dense_infer(x, spec: GatedBlockSpec, params: BlockParams) -> np.ndarray:
    """Ungated dense block; the speed baseline."""
    sh = (1, -1, 1, 1)
    s1, b1 = params.bn1.folded()
    s2, b2 = params.bn2.folded()
    s3, b3 = params.bn3.folded()
    h = conv1x1(x, params.expand)
    h *= s1.reshape(sh)
    h += b1.reshape(sh)
    np.clip(h, 0, 6, out=h)
    h = depthwise3x3_dense(h, params.dw)
    h *= s2.reshape(sh)
    h += b2.reshape(sh)
    np.clip(h, 0, 6, out=h)
    h = conv1x1(h, params.project)
    h *= s3.reshape(sh)
    h += b3.reshape(sh)
    h += x
    return ACTIVATIONS[spec.residual_activation](h)


def _block_sparse_infer(x, spec: GatedBlockSpec, params: BlockParams, cfg: GumbelConfig,
                        mask=None, rng=None, timings: Optional[BlockTimings] = None,
                        run_mask_unit: bool = False):
    # with a forced mask, run_mask_unit still evaluates (and discards) the learned gate for timing
    clock = time.perf_counter
    t0 = clock()
    soft = None
    if (mask is None or run_mask_unit) and spec.gated:
        soft = mask_unit_forward(x, spec.mask_spec, params.mask)
    t1 = clock()
    g = gate_forward(soft, cfg, rng) if soft is not None else None
    if mask is not None:
        g = _check_mask(mask)
    g_dil = dilate_mask(g)
    idx = build_gather_index(g_dil)
    rows = undilated_rows(g, idx)
    t2 = clock()
    T = gather_rows(x, idx)
    t3 = clock()
    # first 1x1 on every dilated row, depthwise and projection on mask rows only
    h = T @ params.expand.weight.T
    _bn_act(h, params.bn1, True)
    h = depthwise3x3_gathered(h, idx, rows, params.dw)
    _bn_act(h, params.bn2, True)
    h = h @ params.project.weight.T
    _bn_act(h, params.bn3, False)
    t4 = clock()
    out = x.copy()
    _kernels.scatter_rows(h, idx.forward[rows], out, True)
    out = ACTIVATIONS[spec.residual_activation](out)
    t5 = clock()
    if timings is not None:
        C, E = params.expand.weight.shape[1], params.expand.weight.shape[0]
        timings.mask += t1 - t0
        timings.bookkeeping += t2 - t1
        timings.gather += t3 - t2
        timings.residual += t4 - t3
        timings.scatter += t5 - t4
        timings.macs += idx.size * C * E + rows.size * (9 * E + E * C)
    return out, g, g_dil
