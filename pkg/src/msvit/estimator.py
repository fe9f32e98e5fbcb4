"""scikit-learn compatible wrapper around the spiking transformer."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from ._validation import check_inputs, check_inputs_labels
from .config import ModelConfig, load_profile
from .data import ArrayDataset, batches
from .model import MSViT, build_model
from .train import TrainConfig, train_loop


class MSViTClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Spiking hierarchical transformer classifier.

    ``X`` is either static images ``(n, C, H, W)`` in [0, 1], repeated over
    ``timesteps`` frames, or binary event frames ``(n, T, C, H, W)``.
    ``transform`` returns the time- and token-pooled final spike features.

    Architecture arguments left as ``None`` come from ``profile`` when one is
    named, otherwise from :class:`ModelConfig` defaults.
    """

    def __init__(self, profile: Optional[str] = None, dims: Optional[Sequence[int]] = None,
                 depths: Optional[Sequence[int]] = None, timesteps: int = 4,
                 attention: Sequence[str] = ("mssa", "mssa", "ssa"), mssa_variant: str = "pq",
                 heads: int = 4, mlp_ratio: int = 4, tau: float = 2.0, v_th: float = 1.0,
                 epochs: int = 10, batch_size: int = 32, lr: float = 6e-4,
                 reference_batch: int = 256, weight_decay: float = 0.01,
                 warmup_epochs: float = 1.0, augment: bool = False, random_state: int = 0,
                 deterministic: bool = True):
        self.profile = profile
        self.dims = dims
        self.depths = depths
        self.timesteps = timesteps
        self.attention = attention
        self.mssa_variant = mssa_variant
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.tau = tau
        self.v_th = v_th
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.reference_batch = reference_batch
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.augment = augment
        self.random_state = random_state
        self.deterministic = deterministic

    def _model_config(self, X: np.ndarray, kind: str, n_classes: int) -> ModelConfig:
        base = load_profile(self.profile) if self.profile else ModelConfig()
        t = X.shape[1] if kind == "events" else self.timesteps
        c = X.shape[2] if kind == "events" else X.shape[1]
        return base.replace(
            in_channels=c, img_size=list(X.shape[-2:]), timesteps=t,
            dims=list(self.dims) if self.dims is not None else list(base.dims),
            depths=list(self.depths) if self.depths is not None else list(base.depths),
            attention=list(self.attention), mssa_variant=self.mssa_variant,
            heads=self.heads, mlp_ratio=self.mlp_ratio,
            lif={**base.to_dict()["lif"], "tau": self.tau, "v_th": self.v_th},
            num_classes=n_classes, seed=self.random_state,
        )

    def fit(self, X, y, eval_set=None):
        X, y, kind = check_inputs_labels(X, y)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        self.input_kind_ = kind
        self.config_ = self._model_config(X, kind, len(self.classes_))
        self.model_ = build_model(self.config_)
        train = ArrayDataset(X, y_enc.astype(np.int64), kind, len(self.classes_))
        ev = None
        if eval_set is not None:
            Xe, ye = eval_set
            Xe, ye, _ = check_inputs_labels(Xe, ye, kind=kind)
            ev = ArrayDataset(Xe, np.searchsorted(self.classes_, ye).astype(np.int64), kind,
                              len(self.classes_))
        hyper = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, base_lr=self.lr,
                            reference_batch=self.reference_batch,
                            weight_decay=self.weight_decay, warmup_epochs=self.warmup_epochs,
                            augment=self.augment, seed=self.random_state,
                            deterministic=self.deterministic)
        self.history_, _ = train_loop(self.model_, train, hyper, eval_data=ev)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _forward(self, X, fn):
        check_is_fitted(self, "model_")
        X, _ = check_inputs(X, timesteps=self.config_.timesteps, kind=self.input_kind_)
        data = ArrayDataset(X, np.zeros(len(X), dtype=np.int64), self.input_kind_)
        self.model_.eval()
        out = []
        with torch.no_grad():
            for xb, _ in batches(data, self.batch_size, None, 0, self.config_.timesteps):
                out.append(fn(xb))
        return torch.cat(out).numpy()

    def decision_function(self, X):
        return self._forward(X, lambda xb: self.model_(xb))

    def predict_proba(self, X):
        return torch.softmax(torch.as_tensor(self.decision_function(X)), dim=1).numpy()

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def transform(self, X):
        return self._forward(X, lambda xb: self.model_.pooled(xb))

    @property
    def model(self) -> MSViT:
        check_is_fitted(self, "model_")
        return self.model_
