"""scikit-learn style classifier wrapping model construction, training and sparse inference."""
from __future__ import annotations

from typing import List

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .budget import BlockBudget
from .data import GlyphDataset
from .model import DynConvNet, ModelConfig, TrainingRecipe
from .sparse import GatedBlockSpec
from .tensor import DTYPE
from .training import EpochLog, train


def _as_images(X, name: str = "X") -> np.ndarray:
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"{name} must be numeric")
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (n, H, W) or (n, C, H, W); got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} has no samples")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square; got {X.shape[2]}x{X.shape[3]}")
    X = X.astype(DTYPE, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinity")
    return np.ascontiguousarray(X)


class DynConvClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier built from spatially gated inverted-residual blocks.

    ``fit`` optimises cross-entropy plus the FLOPs-budget loss selected by
    ``criterion``; ``predict`` runs gather/scatter sparse inference.

    Parameters mirror :class:`~dynconv.model.TrainingRecipe` plus the block
    layout. Inputs are ``(n, H, W)`` or ``(n, C, H, W)`` square images.
    """

    def __init__(self, n_blocks: int = 4, channels: int = 16, expansion: int = 96,
                 mask_unit: str = "conv1x1", residual_activation: str = "identity",
                 theta: float = 0.5, alpha: float = 10.0, criterion: str = "net_bounds",
                 epochs: int = 30, batch_size: int = 32, lr: float = 2e-3, optimizer: str = "adam",
                 weight_decay: float = 0.0, noise_off_fraction: float = 0.2, mask_lr_scale: float = 1.0,
                 stem_stride: int = 2, validation_fraction: float = 0.0, random_state: int = 0):
        self.n_blocks = n_blocks
        self.channels = channels
        self.expansion = expansion
        self.mask_unit = mask_unit
        self.residual_activation = residual_activation
        self.theta = theta
        self.alpha = alpha
        self.criterion = criterion
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.weight_decay = weight_decay
        self.noise_off_fraction = noise_off_fraction
        self.mask_lr_scale = mask_lr_scale
        self.stem_stride = stem_stride
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _config(self, input_size: int, in_channels: int, num_classes: int) -> ModelConfig:
        recipe = TrainingRecipe(
            optimizer=self.optimizer, lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
            batch_size=self.batch_size, theta=self.theta, alpha=self.alpha, criterion=self.criterion,
            seed=self.random_state, noise_off_fraction=self.noise_off_fraction,
            mask_lr_scale=self.mask_lr_scale,
        )
        blocks = [GatedBlockSpec(self.channels, self.expansion, self.mask_unit, True, self.residual_activation)
                  for _ in range(self.n_blocks)]
        return ModelConfig(blocks=blocks, input_size=input_size, in_channels=in_channels,
                           num_classes=num_classes, stem_channels=self.channels,
                           stem_stride=self.stem_stride, recipe=recipe).validate()

    def fit(self, X, y):
        X = _as_images(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError(f"y must be 1-D with {len(X)} labels; got shape {y.shape}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        cfg = self._config(X.shape[2], X.shape[1], len(self.classes_))
        boxes = np.zeros((len(X), 4), dtype=np.int64)
        full = GlyphDataset(X, codes.astype(np.int64), boxes)
        rng = np.random.default_rng(self.random_state)
        n_val = int(round(self.validation_fraction * len(X)))
        if n_val:
            perm = rng.permutation(len(X))
            train_set, val_set = full.subset(perm[n_val:]), full.subset(perm[:n_val])
        else:
            train_set, val_set = full, full.subset(np.arange(min(len(X), 512)))
        self.model_, self.history_ = train(cfg, train_set, val_set)
        return self

    @classmethod
    def from_model(cls, model: DynConvNet, classes=None) -> "DynConvClassifier":
        """Wrap an already trained network (e.g. loaded from disk)."""
        cfg, r = model.cfg, model.cfg.recipe
        b0 = cfg.blocks[0] if cfg.blocks else GatedBlockSpec(cfg.stem_channels)
        est = cls(n_blocks=len(cfg.blocks), channels=cfg.stem_channels, expansion=b0.expansion_channels,
                  mask_unit=b0.mask_unit, residual_activation=b0.residual_activation, theta=r.theta,
                  alpha=r.alpha, criterion=r.criterion, epochs=r.epochs, batch_size=r.batch_size, lr=r.lr,
                  optimizer=r.optimizer, weight_decay=r.weight_decay, noise_off_fraction=r.noise_off_fraction,
                  mask_lr_scale=r.mask_lr_scale, stem_stride=cfg.stem_stride, random_state=r.seed)
        est.model_ = model
        est.history_ = []
        est.classes_ = np.arange(cfg.num_classes) if classes is None else np.asarray(classes)
        return est

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _as_images(X)
        cfg = self.model_.cfg
        if X.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
            raise ValueError(f"expected images of shape {(cfg.in_channels, cfg.input_size, cfg.input_size)}, "
                             f"got {X.shape[1:]}")
        return X

    def decision_function(self, X, mode: str = "infer-sparse", batch_size: int = 256) -> np.ndarray:
        X = self._check(X)
        return np.concatenate([self.model_.infer(X[i:i + batch_size], mode).logits
                               for i in range(0, len(X), batch_size)])

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X, mode: str = "infer-sparse") -> np.ndarray:
        z = self.decision_function(X, mode)
        return self.classes_[z.argmax(axis=1)]

    def budget_report(self, X) -> List[BlockBudget]:
        """Per-gated-block FLOPs accounting for the masks chosen on ``X``."""
        X = self._check(X)
        return self.model_.infer(X, "infer-sparse").reports

    def ponder_maps(self, X) -> np.ndarray:
        from .harness import ponder_maps

        return ponder_maps(self.model_, self._check(X))

    @property
    def epoch_log_(self) -> List[EpochLog]:
        check_is_fitted(self, "model_")
        return self.history_

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.two_d_array = False
        return tags

