"""End-to-end training of gated networks on the toy glyph task."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .budget import SparsityConfig, anneal_p, network_fraction, total_loss
from .data import GlyphDataset, make_glyph_dataset
from .gating import GumbelConfig, noise_enabled_at, temperature_at
from .model import DynConvNet, ModelConfig, build_model

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochLog:
    epoch: int
    p: float
    tau: float
    noise: bool
    lr: float
    task_loss: float
    sp_net: float
    sp_low: float
    sp_up: float
    train_acc: float
    val_acc: float
    val_fraction: float
    fractions: List[float] = field(default_factory=list)
    val_fractions: List[float] = field(default_factory=list)
    step_fractions: List[float] = field(default_factory=list)

    def as_row(self) -> dict:
        lists = ("fractions", "val_fractions", "step_fractions")
        row = {k: v for k, v in asdict(self).items() if k not in lists}
        row["noise"] = int(self.noise)
        for i, f in enumerate(self.fractions):
            row[f"frac_b{i}"] = f
        for i, f in enumerate(self.step_fractions):
            row[f"step_frac_b{i}"] = f
        for i, f in enumerate(self.val_fractions):
            row[f"val_frac_b{i}"] = f
        return row


def lr_at(epoch: int, recipe) -> float:
    passed = sum(epoch >= int(round(f * recipe.epochs)) for f in recipe.lr_decay_at)
    return recipe.lr * recipe.lr_gamma ** passed


def evaluate(model: DynConvNet, data: GlyphDataset, mode: str = "infer-sparse", batch_size: int = 256):
    """Accuracy and per-gated-block executed fractions (noise off)."""
    correct = 0
    used = np.zeros(len(model.gated_indices))
    dense = np.zeros(len(model.gated_indices))
    for i in range(0, len(data), batch_size):
        xb = data.images[i:i + batch_size]
        res = model.infer(xb, mode)
        correct += int((res.logits.argmax(axis=1) == data.labels[i:i + batch_size]).sum())
        for j, r in enumerate(res.reports):
            used[j] += float(r.flops_sparse) * len(xb)
            dense[j] += r.flops_dense * len(xb)
    fractions = (used / np.maximum(dense, 1)).tolist()
    net = float(used.sum() / dense.sum()) if dense.sum() else 1.0
    return correct / len(data), fractions, net


def probe_fractions(model: DynConvNet, images: np.ndarray, gumbel: GumbelConfig, seed: int) -> List[float]:
    """Per-block executed fraction in training mode (gate noise as scheduled) at the current weights."""
    res = model.forward_traced(images, gumbel=gumbel, rng=np.random.default_rng(seed), bn_training=False)
    return [_f(rep.fraction) for rep in res.reports]


def train(cfg: ModelConfig, train_set: Optional[GlyphDataset] = None, val_set: Optional[GlyphDataset] = None,
          callback: Optional[Callable[[EpochLog], None]] = None) -> Tuple[DynConvNet, List[EpochLog]]:
    """Optimise task loss plus sparsity terms; returns the model and one log per epoch.

    ``EpochLog.fractions`` is measured after the epoch's last step on a fixed
    probe batch with the epoch's gate noise, so it reflects the state the
    bounds loss was steering towards; ``step_fractions`` averages the noisy
    fractions seen during the epoch.
    """
    r = cfg.validate().recipe
    if train_set is None:
        train_set = make_glyph_dataset(r.train_size, seed=r.seed, noise_sigma=r.noise_sigma, canvas=cfg.input_size)
    if val_set is None:
        val_set = make_glyph_dataset(r.val_size, seed=r.seed + 10_000, noise_sigma=r.noise_sigma,
                                     canvas=cfg.input_size)
    model = build_model(cfg)
    sp_cfg = SparsityConfig(theta=r.theta, alpha=r.alpha, epochs=r.epochs, criterion=r.criterion)
    state = ad.OptimizerState(kind=r.optimizer)
    order_rng = np.random.default_rng(r.seed)
    noise_rng = np.random.default_rng(r.seed + 1)
    params = dict(model.named_parameters())
    lr_scale = {k: r.mask_lr_scale for k in params if ".mask." in k}
    logs: List[EpochLog] = []

    for epoch in range(r.epochs):
        lr = lr_at(epoch, r)
        gumbel = GumbelConfig(
            temperature=temperature_at(epoch, r.tau_start, r.tau_end, r.tau_anneal_epochs),
            noise_enabled=noise_enabled_at(epoch, r.epochs, r.noise_off_fraction),
            seed=r.seed,
        )
        perm = order_rng.permutation(len(train_set))
        sums = np.zeros(4)
        frac_sum = np.zeros(len(model.gated_indices))
        correct = steps = 0
        for start in range(0, len(perm), r.batch_size):
            idx = perm[start:start + r.batch_size]
            xb, yb = train_set.images[idx], train_set.labels[idx]
            bind = ad.Binder(model.named_parameters())
            res = model.forward_traced(xb, bind, gumbel, noise_rng, bn_training=True)
            task = ad.cross_entropy(res.logits, yb)
            terms = total_loss(task, res.reports, sp_cfg, epoch)
            total = _f(terms.total)
            if not math.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {steps}: task={_f(terms.task)} "
                    f"net={_f(terms.net)} low={_f(terms.low)} up={_f(terms.up)} lr={lr}")
            ad.backward(terms.total)
            grads = bind.grads()
            if r.optimizer == "adam":
                ad.adam_step(params, grads, state, lr, weight_decay=r.weight_decay, lr_scale=lr_scale)
            else:
                ad.sgd_step(params, grads, state, lr, momentum=r.momentum, weight_decay=r.weight_decay,
                            lr_scale=lr_scale)
            sums += [_f(terms.task), _f(terms.net), _f(terms.low), _f(terms.up)]
            frac_sum += [_f(rep.fraction) for rep in res.reports]
            correct += int((res.logits.value.argmax(axis=1) == yb).sum())
            steps += 1
        val_acc, val_fracs, val_net = evaluate(model, val_set)
        probe = probe_fractions(model, val_set.images[:r.probe_size], gumbel, r.seed + 2)
        entry = EpochLog(
            epoch=epoch, p=anneal_p(epoch, r.epochs), tau=gumbel.temperature, noise=gumbel.noise_enabled,
            lr=lr, task_loss=sums[0] / steps, sp_net=sums[1] / steps, sp_low=sums[2] / steps,
            sp_up=sums[3] / steps, train_acc=correct / len(perm), val_acc=val_acc, val_fraction=val_net,
            fractions=probe, val_fractions=val_fracs, step_fractions=(frac_sum / steps).tolist(),
        )
        logs.append(entry)
        log.info("epoch %d task %.4f val_acc %.3f frac %.3f", epoch, entry.task_loss, val_acc, val_net)
        if callback is not None:
            callback(entry)
    return model, logs


def _f(v) -> float:
    return v.item() if isinstance(v, ad.Var) else float(v)
