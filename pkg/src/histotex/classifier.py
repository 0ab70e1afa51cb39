"""Estimator facade over the network, trainer and data plumbing."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .checkpoint import load_checkpoint
from .data import AugmentConfig, BatchSpec, array_provider
from .network import TextureNet, build_network
from .optim import TrainStage, train
from .rng import RngStream
from .validation import check_image_batch, check_labels

_IDENTITY_STATS = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


class TextureClassifier(BaseEstimator, ClassifierMixin):
    """Train-from-arrays texture classifier with the usual fit/predict API.

    ``X`` is (N, H, W, 3) in [0,1] floats or uint8; images are resized to
    ``image_size`` on the way in. A stratified ``val_fraction`` of the
    training data drives checkpoint selection and the logged validation
    curve. ``schedule`` picks the one-cycle policy or a constant rate; with
    ``head_epochs > 0`` a head-only warm-up stage runs first (useful with
    pretrained backbones).
    """

    def __init__(self, num_classes: int = 8, image_size: int = 64,
                 epochs: int = 10, head_epochs: int = 0, batch_size: int = 32,
                 lr_max: float = 3e-3, warmup_frac: float = 0.3,
                 schedule: str = "one_cycle", discriminative: bool = False,
                 beta1: float = 0.9, beta2: float = 0.99,
                 weight_decay: float = 0.01,
                 dropout: tuple[float, float] = (0.25, 0.5),
                 augment: Optional[str] = "geometric",
                 val_fraction: float = 0.15,
                 channel_means: tuple[float, float, float] = _IDENTITY_STATS[0],
                 channel_stds: tuple[float, float, float] = _IDENTITY_STATS[1],
                 pretrained: Optional[str] = None, seed: int = 0):
        self.num_classes = num_classes
        self.image_size = image_size
        self.epochs = epochs
        self.head_epochs = head_epochs
        self.batch_size = batch_size
        self.lr_max = lr_max
        self.warmup_frac = warmup_frac
        self.schedule = schedule
        self.discriminative = discriminative
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.augment = augment
        self.val_fraction = val_fraction
        self.channel_means = channel_means
        self.channel_stds = channel_stds
        self.pretrained = pretrained
        self.seed = seed

    # ------------------------------------------------------------------ fit
    def _augment_config(self) -> Optional[AugmentConfig]:
        if self.augment in (None, "none"):
            return None
        if self.augment == "geometric":
            return AugmentConfig.geometric()
        if self.augment == "full":
            return AugmentConfig()
        raise ValueError(f"unknown augment preset {self.augment!r}")

    def _stratified_holdout(self, y: np.ndarray,
                            gen: np.random.Generator) -> np.ndarray:
        val_mask = np.zeros(len(y), dtype=bool)
        for cls in np.unique(y):
            idx = np.nonzero(y == cls)[0]
            n_val = max(1, int(round(len(idx) * self.val_fraction)))
            val_mask[gen.permutation(idx)[:n_val]] = True
        return val_mask

    def fit(self, X, y) -> "TextureClassifier":
        X = check_image_batch(X)
        y = check_labels(y, self.num_classes)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        self.classes_ = np.arange(self.num_classes)

        stream = RngStream(self.seed)
        val_mask = self._stratified_holdout(y, stream.generator("holdout"))
        spec = BatchSpec(batch_size=self.batch_size, image_size=self.image_size,
                         means=tuple(self.channel_means),
                         stds=tuple(self.channel_stds), seed=self.seed)
        provider = array_provider(
            {"train": (X[~val_mask], y[~val_mask]),
             "val": (X[val_mask], y[val_mask])},
            class_names=[str(c) for c in self.classes_], spec=spec,
            augment=self._augment_config())

        pretrained = None
        if self.pretrained is not None:
            pretrained = load_checkpoint(self.pretrained).model_tensors()
        self.model_ = build_network(num_classes=self.num_classes,
                                    input_size=self.image_size,
                                    dropout=tuple(self.dropout),
                                    rng=stream, pretrained=pretrained)

        group_lrs = None if self.discriminative else (self.lr_max,) * 4
        stages = []
        if self.head_epochs:
            stages.append(TrainStage(groups=frozenset({4}), epochs=self.head_epochs,
                                     lr_max=self.lr_max, schedule=self.schedule,
                                     warmup_frac=self.warmup_frac))
        stages.append(TrainStage(groups=frozenset({1, 2, 3, 4}), epochs=self.epochs,
                                 lr_max=self.lr_max, group_lrs=group_lrs,
                                 schedule=self.schedule,
                                 warmup_frac=self.warmup_frac))
        result = train(self.model_, provider, stages, rng=stream,
                       betas=(self.beta1, self.beta2),
                       weight_decay=self.weight_decay,
                       class_names=[str(c) for c in self.classes_])
        self.history_ = result.rows
        self.best_val_loss_ = result.best_val_loss
        return self

    # -------------------------------------------------------------- predict
    def _require_fitted(self) -> TextureNet:
        model = getattr(self, "model_", None)
        if model is None:
            raise RuntimeError("TextureClassifier is not fitted; call fit(X, y)")
        return model

    def predict_proba(self, X) -> np.ndarray:
        model = self._require_fitted()
        X = check_image_batch(X)
        spec = BatchSpec(batch_size=self.batch_size, image_size=self.image_size,
                         means=tuple(self.channel_means),
                         stds=tuple(self.channel_stds), seed=self.seed)
        provider = array_provider(
            {"test": (X, np.zeros(len(X), np.int64))},
            class_names=[str(c) for c in self.classes_], spec=spec)
        probs = [model.forward(xb, mode="eval").probs
                 for xb, _ in provider.test_batches()]
        return np.concatenate(probs)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)
