"""Multiply-accumulate accounting and sparsity losses.

Costs count convolution MACs only. Sparse costs may be traced ``Var`` values
(when ``N_b`` comes from a straight-through gate) or plain floats; the loss
functions accept either and return the same kind.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from .autodiff import Var
from .tensor import ConfigurationError

CRITERIA = ("net", "per_layer", "net_bounds")
Scalar = Union[float, Var]


@dataclass
class BlockBudget:
    block: int
    flops_dense: float
    flops_sparse: Scalar
    n_active: Scalar
    n_dilated: float

    @property
    def fraction(self) -> Scalar:
        return self.flops_sparse / self.flops_dense if self.flops_dense else 0.0

    def as_row(self) -> dict:
        return {
            "block": self.block,
            "flops_dense": self.flops_dense,
            "flops_sparse": _float(self.flops_sparse),
            "fraction": _float(self.fraction),
        }


BudgetReport = List[BlockBudget]


@dataclass
class SparsityConfig:
    theta: float = 0.5
    alpha: float = 10.0
    epochs: int = 60
    criterion: str = "net_bounds"

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise ConfigurationError("theta must lie in (0, 1]")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be non-negative")
        if self.criterion not in CRITERIA:
            raise ConfigurationError(f"criterion must be one of {CRITERIA}")


def _float(v) -> float:
    return v.item() if isinstance(v, Var) else float(v)


def _relu(v):
    return v.relu() if isinstance(v, Var) else max(0.0, v)


def flops_dense(spec, H: int, W: int) -> int:
    C, E = spec.channels, spec.expansion_channels
    return H * W * (9 * E + 2 * C * E)


def flops_sparse(spec, n_active: Scalar, n_dilated: Scalar) -> Scalar:
    C, E = spec.channels, spec.expansion_channels
    return n_dilated * (C * E) + n_active * (9 * E + E * C)


def block_budget(spec, H: int, W: int, g: Optional[np.ndarray], block: int = 0) -> BlockBudget:
    """Per-image (batch-averaged) budget of one block for a hard mask ``g``."""
    from .sparse import dilate_mask

    dense = flops_dense(spec, H, W)
    if g is None:
        return BlockBudget(block, dense, float(dense), float(H * W), float(H * W))
    n = g.shape[0]
    n_b = float(g.sum()) / n
    n_d = float(dilate_mask(g).sum()) / n
    return BlockBudget(block, dense, flops_sparse(spec, n_b, n_d), n_b, n_d)


def loss_net(reports: Sequence[BlockBudget], theta: float) -> Scalar:
    if not reports:
        raise ConfigurationError("sparsity loss needs at least one gated block")
    used = sum(r.flops_sparse for r in reports)
    total = sum(r.flops_dense for r in reports)
    d = used * (1.0 / total) - theta
    return d * d


def loss_per_layer(reports: Sequence[BlockBudget], theta: float) -> Scalar:
    if not reports:
        raise ConfigurationError("sparsity loss needs at least one gated block")
    return sum((r.fraction - theta) * (r.fraction - theta) for r in reports)


def anneal_p(epoch: int, epochs: int) -> float:
    """Cosine schedule from 1 at the first epoch to 0 at the last."""
    if epochs <= 1:
        return 0.0
    return 0.5 * (1.0 + math.cos(math.pi * epoch / (epochs - 1)))


def bounds(p: float, theta: float):
    """Feasible per-block band ``[p*theta, 1 - p*(1 - theta)]``."""
    # upper end written as theta + (1-p)(1-theta) so it never rounds below theta
    return p * theta, theta + (1.0 - p) * (1.0 - theta)


def loss_bounds(reports: Sequence[BlockBudget], p: float, theta: float):
    """Mean squared violations of the annealed lower and upper bounds."""
    if not reports:
        raise ConfigurationError("sparsity loss needs at least one gated block")
    lo, hi = bounds(p, theta)
    B = len(reports)
    low = sum(_sq(_relu(lo - r.fraction)) for r in reports) * (1.0 / B)
    up = sum(_sq(_relu(r.fraction - hi)) for r in reports) * (1.0 / B)
    return low, up


def _sq(v):
    return v * v


@dataclass
class LossTerms:
    total: Scalar
    task: Scalar
    net: Scalar = 0.0
    per_layer: Scalar = 0.0
    low: Scalar = 0.0
    up: Scalar = 0.0


def total_loss(task_loss: Scalar, reports: Sequence[BlockBudget], cfg: SparsityConfig, epoch: int) -> LossTerms:
    """Task loss plus ``alpha`` times the sparsity terms selected by ``cfg.criterion``."""
    terms = LossTerms(total=task_loss, task=task_loss)
    if not reports:
        return terms
    if cfg.criterion == "per_layer":
        terms.per_layer = loss_per_layer(reports, cfg.theta)
        sp = terms.per_layer
    else:
        terms.net = loss_net(reports, cfg.theta)
        sp = terms.net
        if cfg.criterion == "net_bounds":
            terms.low, terms.up = loss_bounds(reports, anneal_p(epoch, cfg.epochs), cfg.theta)
            sp = sp + terms.low + terms.up
    terms.total = task_loss + sp * cfg.alpha
    return terms


def network_fraction(reports: Iterable[BlockBudget]) -> float:
    reports = list(reports)
    total = sum(r.flops_dense for r in reports)
    return sum(_float(r.flops_sparse) for r in reports) / total if total else 1.0


def report_csv(reports: Sequence[BlockBudget]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["block", "flops_dense", "flops_sparse", "fraction"], lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.as_row())
    return buf.getvalue()
