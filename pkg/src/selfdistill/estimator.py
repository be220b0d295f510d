"""Scikit-learn estimator facade over the multi-exit trainer.

SelfDistillationClassifier wires build_model + train + the inference
engine into the fit/predict/predict_proba/score contract, so the toolkit
drops into pipelines, grid search, and cross_val_score. 2-D inputs train
the mlp backbone; 4-D (n, channels, h, w) inputs train a conv backbone.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_X_y

from .config import _parse_sections  # shared section-spec grammar
from .data import Dataset, Split
from .inference import EnsembleSpec, ensemble, predict_at_exit
from .losses import DistillConfig
from .models import build_model
from .training import TrainPlan, train


def _validate_x(x, arch: str):
    if arch == "mlp":
        return check_array(x, dtype=np.float32)
    arr = check_array(x, dtype=np.float32, allow_nd=True)
    if arr.ndim != 4:
        raise ValueError(f"conv backbones expect 4-D input (n, ch, h, w), got shape {arr.shape}")
    return arr


class SelfDistillationClassifier(ClassifierMixin, BaseEstimator):
    """Multi-exit classifier trained with self-distillation.

    Parameters mirror the training plan: `sections` uses the compact spec
    grammar ("1x32,1x32" = two sections of one block at width 32; a trailing
    'd' halves conv feature maps). `inference` selects what predict() uses:
    "deepest", "ensemble", or an exit index.
    """

    def __init__(self, arch: str = "mlp", sections: str = "1x32,1x32",
                 regime: str = "self_distill", alpha: float = 0.3,
                 hint_weight: float = 0.03, temperature: float = 1.0,
                 epochs: int = 30, batch_size: int = 32, lr: float = 0.05,
                 weight_decay: float = 0.0, momentum: float = 0.9,
                 augment: str = "none", inference: str | int = "deepest",
                 validation_fraction: float = 0.0, random_state: int = 0):
        self.arch = arch
        self.sections = sections
        self.regime = regime
        self.alpha = alpha
        self.hint_weight = hint_weight
        self.temperature = temperature
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.augment = augment
        self.inference = inference
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _plan(self) -> TrainPlan:
        return TrainPlan(
            regime=self.regime, epochs=self.epochs, batch_size=self.batch_size,
            lr=self.lr, weight_decay=self.weight_decay, momentum=self.momentum,
            seed=self.random_state, augment=self.augment,
            distill=DistillConfig(alpha=self.alpha, lam=self.hint_weight,
                                  temperature=self.temperature),
        ).check()

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32, allow_nd=True)
        X = _validate_x(X, self.arch)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        plan = self._plan()

        errors = []
        sections = _parse_sections(self.sections, "sections", errors)
        if errors:
            raise ValueError("; ".join(errors))
        in_shape = (X.shape[1],) if self.arch == "mlp" else tuple(X.shape[1:])
        model = build_model(self.arch, sections, len(self.classes_), in_shape=in_shape,
                            seed=self.random_state)

        n = len(X)
        n_val = int(round(self.validation_fraction * n))
        if n_val > 0:
            rng = np.random.default_rng(self.random_state)
            perm = rng.permutation(n)
            val_idx, train_idx = perm[:n_val], perm[n_val:]
            dataset = Dataset(Split(X[train_idx], encoded[train_idx].astype(np.int64)),
                              Split(X[val_idx], encoded[val_idx].astype(np.int64)),
                              len(self.classes_), "arrays")
        else:
            # trainer needs a non-empty eval split; fall back to train data
            dataset = Dataset(Split(X, encoded.astype(np.int64)),
                              Split(X, encoded.astype(np.int64)),
                              len(self.classes_), "arrays")
        model, records = train(model, dataset, plan)
        self.model_ = model
        self.history_ = records
        self.n_features_in_ = X.shape[1] if self.arch == "mlp" else int(np.prod(X.shape[1:]))
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("fit this classifier before calling predict/predict_proba")

    def predict_proba(self, X):
        self._check_fitted()
        X = _validate_x(X, self.arch)
        if self.inference == "ensemble":
            _, probs = ensemble(self.model_, X, EnsembleSpec())
        elif self.inference == "deepest":
            _, probs = predict_at_exit(self.model_, X, self.model_.exit_indices[-1])
        else:
            _, probs = predict_at_exit(self.model_, X, int(self.inference))
        return probs

    def predict(self, X):
        self._check_fitted()
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
