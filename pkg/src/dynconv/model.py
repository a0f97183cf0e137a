"""Configurable classifier: dense stem, gated inverted-residual blocks, pooled linear head."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import yaml

from . import autodiff as ad
from .budget import CRITERIA, BlockBudget, block_budget, flops_sparse
from .gating import GumbelConfig, gate_traced
from .sparse import (
    BlockParams,
    BlockTimings,
    GatedBlockSpec,
    block_forward,
    block_forward_traced,
    dilate_mask,
)
from .tensor import DTYPE, BatchNormParams, ConfigurationError, batchnorm, conv3x3, relu6


@dataclass
class TrainingRecipe:
    optimizer: str = "adam"
    lr: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 32
    lr_decay_at: List[float] = field(default_factory=lambda: [0.6, 0.9])
    lr_gamma: float = 0.1
    theta: float = 0.5
    alpha: float = 10.0
    criterion: str = "net_bounds"
    seed: int = 0
    noise_off_fraction: float = 0.2
    tau_start: float = 1.0
    tau_end: float = 1.0
    tau_anneal_epochs: int = 0
    train_size: int = 1024
    val_size: int = 512
    noise_sigma: float = 0.1
    probe_size: int = 128
    mask_lr_scale: float = 1.0

    def validate(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError("optimizer must be 'adam' or 'sgd'")
        if not 0 < self.theta <= 1:
            raise ConfigurationError("theta must lie in (0, 1]")
        if self.criterion not in CRITERIA:
            raise ConfigurationError(f"criterion must be one of {CRITERIA}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if not 0 <= self.noise_off_fraction <= 1:
            raise ConfigurationError("noise_off_fraction must lie in [0, 1]")
        if self.lr <= 0 or self.mask_lr_scale <= 0:
            raise ConfigurationError("lr and mask_lr_scale must be positive")


@dataclass
class ModelConfig:
    blocks: List[GatedBlockSpec] = field(default_factory=lambda: [GatedBlockSpec(16, 96) for _ in range(4)])
    input_size: int = 32
    in_channels: int = 1
    num_classes: int = 8
    stem_channels: int = 16
    stem_stride: int = 2
    mask_bias_init: float = 1.0
    recipe: TrainingRecipe = field(default_factory=TrainingRecipe)

    def validate(self) -> "ModelConfig":
        if self.stem_stride not in (1, 2):
            raise ConfigurationError("stem_stride must be 1 or 2")
        if self.input_size < 1 or self.num_classes < 2 or self.in_channels < 1:
            raise ConfigurationError("invalid input size, channel or class count")
        for i, b in enumerate(self.blocks):
            if b.channels != self.stem_channels:
                raise ConfigurationError(
                    f"block {i} has {b.channels} channels; blocks keep the stem width {self.stem_channels}")
        self.recipe.validate()
        return self

    @property
    def feature_size(self) -> int:
        return (self.input_size - 1) // self.stem_stride + 1

    # serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        _reject_unknown(d, cls, "model config")
        blocks = []
        for b in d.pop("blocks", []):
            _reject_unknown(b, GatedBlockSpec, "block")
            blocks.append(GatedBlockSpec(**b))
        recipe = d.pop("recipe", {}) or {}
        _reject_unknown(recipe, TrainingRecipe, "recipe")
        return cls(blocks=blocks, recipe=TrainingRecipe(**recipe), **d).validate()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ModelConfig":
        return cls.from_dict(yaml.safe_load(text) or {})

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_yaml(Path(path).read_text())


def _reject_unknown(d: dict, cls, what: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigurationError(f"unknown {what} keys: {sorted(unknown)}")


def toy_config(n_blocks: int = 4, channels: int = 16, expansion: int = 96, **recipe) -> ModelConfig:
    return ModelConfig(
        blocks=[GatedBlockSpec(channels, expansion) for _ in range(n_blocks)],
        stem_channels=channels,
        recipe=TrainingRecipe(**recipe),
    ).validate()


@dataclass
class ForwardResult:
    logits: object
    masks: List[Optional[np.ndarray]]
    reports: List[BlockBudget]
    gates: list = field(default_factory=list)
    features: list = field(default_factory=list)


class DynConvNet:
    """Parameters and forward passes of the whole classifier.

    Parameters are plain arrays mutated in place by the optimisers, so the
    typed parameter objects and :meth:`named_parameters` always agree.
    """

    def __init__(self, cfg: ModelConfig, seed: Optional[int] = None):
        self.cfg = cfg.validate()
        rng = np.random.default_rng(cfg.recipe.seed if seed is None else seed)
        C0, Cin = cfg.stem_channels, cfg.in_channels
        self.stem_weight = (rng.standard_normal((C0, Cin, 3, 3)) * math.sqrt(2.0 / (9 * Cin))).astype(DTYPE)
        self.stem_bn = BatchNormParams.identity(C0)
        self.blocks = [BlockParams.init(s, rng, cfg.mask_bias_init) for s in cfg.blocks]
        bound = 1.0 / math.sqrt(C0)
        self.head_weight = rng.uniform(-bound, bound, (cfg.num_classes, C0)).astype(DTYPE)
        self.head_bias = np.zeros(cfg.num_classes, DTYPE)

    @property
    def specs(self) -> List[GatedBlockSpec]:
        return self.cfg.blocks

    @property
    def gated_indices(self) -> List[int]:
        return [i for i, s in enumerate(self.specs) if s.gated]

    def named_parameters(self):
        out = [("stem.weight", self.stem_weight), ("stem_bn.gamma", self.stem_bn.gamma),
               ("stem_bn.beta", self.stem_bn.beta)]
        for i, b in enumerate(self.blocks):
            out += b.named_parameters(f"blocks.{i}.")
        out += [("head.weight", self.head_weight), ("head.bias", self.head_bias)]
        return out

    def named_buffers(self):
        out = [("stem_bn.running_mean", self.stem_bn.running_mean), ("stem_bn.running_var", self.stem_bn.running_var)]
        for i, b in enumerate(self.blocks):
            out += b.named_buffers(f"blocks.{i}.")
        return out

    def parameter_count(self) -> int:
        return sum(a.size for _, a in self.named_parameters())

    def state_dict(self) -> dict:
        return {k: v.copy() for k, v in self.named_parameters() + self.named_buffers()}

    def load_state_dict(self, state: dict) -> None:
        for k, v in self.named_parameters() + self.named_buffers():
            if k not in state:
                raise ConfigurationError(f"missing state entry {k}")
            if state[k].shape != v.shape:
                raise ConfigurationError(f"shape mismatch for {k}: {state[k].shape} vs {v.shape}")
            v[...] = state[k]

    def save(self, path) -> None:
        path = Path(path)
        np.savez(path, __config__=np.array(self.cfg.to_yaml()), **self.state_dict())

    @classmethod
    def load(cls, path) -> "DynConvNet":
        with np.load(path, allow_pickle=False) as z:
            cfg = ModelConfig.from_yaml(str(z["__config__"]))
            net = cls(cfg)
            net.load_state_dict({k: z[k] for k in z.files if k != "__config__"})
        return net

    # forward passes --------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        want = (self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ConfigurationError(f"expected input (N, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")
        return x

    def forward_traced(self, x, bind=ad.constant_binder, gumbel: Optional[GumbelConfig] = None, rng=None,
                       bn_training: bool = False, update_stats: bool = True,
                       masks: Optional[Sequence[Optional[np.ndarray]]] = None, gate_fn=gate_traced) -> ForwardResult:
        """Dense forward on the autodiff trace (training mode when ``bn_training``)."""
        x = self._check_input(x)
        xv = ad.Var(x)
        h = ad.conv3x3(xv, bind(self.stem_weight), self.cfg.stem_stride)
        h = ad.relu6(ad.batchnorm(h, bind(self.stem_bn.gamma), bind(self.stem_bn.beta), self.stem_bn,
                                  bn_training, update_stats))
        N, _, H, W = h.shape
        out_masks, reports, gates = [], [], []
        for i, (spec, params) in enumerate(zip(self.specs, self.blocks)):
            forced = None if masks is None else masks[i]
            tr = block_forward_traced(h, spec, params, bind, gumbel, rng, bn_training, update_stats,
                                      mask=forced, gate_fn=gate_fn)
            h = tr.out
            if tr.gate is None:
                out_masks.append(None)
                continue
            hard = tr.gate.value[:, 0] > 0.5
            out_masks.append(hard)
            gates.append(tr.gate)
            if spec.gated:
                n_b = tr.gate.sum() * (1.0 / N)
                n_d = float(dilate_mask(hard).sum()) / N
                dense = block_budget(spec, H, W, None).flops_dense
                reports.append(BlockBudget(i, dense, flops_sparse(spec, n_b, n_d), n_b, n_d))
        logits = ad.linear(ad.global_avg_pool(h), bind(self.head_weight), bind(self.head_bias))
        return ForwardResult(logits, out_masks, reports, gates)

    def stem(self, x: np.ndarray) -> np.ndarray:
        x = self._check_input(x)
        h = conv3x3(x, self.stem_weight, stride=self.cfg.stem_stride)
        return relu6(batchnorm(h, self.stem_bn, training=False))

    def head(self, h: np.ndarray) -> np.ndarray:
        return h.mean(axis=(2, 3)) @ self.head_weight.T + self.head_bias

    def infer(self, x, mode: str = "infer-sparse", masks=None, timings: Optional[List[BlockTimings]] = None,
              return_features: bool = False, run_mask_unit: bool = False) -> ForwardResult:
        """Noise-free forward pass.

        ``infer-sparse`` runs gated blocks through gather/scatter, ``train-dense``
        applies the same masks densely, ``infer-dense`` ignores masks entirely.
        """
        h = self.stem(x)
        out_masks, reports = [], []
        features = [h]
        for i, (spec, params) in enumerate(zip(self.specs, self.blocks)):
            forced = None if masks is None else masks[i]
            t = None if timings is None else timings[i]
            h, g, rep = block_forward(h, spec, params, GumbelConfig(noise_enabled=False), mode,
                                      mask=forced, timings=t, run_mask_unit=run_mask_unit)
            rep.block = i
            if spec.gated or forced is not None:
                out_masks.append(g)
                if spec.gated:
                    reports.append(rep)
            else:
                out_masks.append(None)
            features.append(h)
        return ForwardResult(self.head(h), out_masks, reports, features=features if return_features else [])

    def predict(self, x, mode: str = "infer-sparse", batch_size: int = 256) -> np.ndarray:
        return np.concatenate([self.infer(x[i:i + batch_size], mode).logits.argmax(axis=1)
                               for i in range(0, len(x), batch_size)])


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> DynConvNet:
    """Instantiate stem, blocks and head with fan-in scaled weights.

    Mask-unit biases start at ``cfg.mask_bias_init`` (+1) so early masks are
    nearly full.
    """
    return DynConvNet(cfg, seed)
