"""Scikit-learn compatible classifier wrapping the multi-exit trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import LongTailedDataset
from .exceptions import ConfigurationError
from .exits import ExitPolicy, predict as route_predict
from .model import build_network
from .train import TrainConfig, train


class ElfClassifier(BaseEstimator, ClassifierMixin):
    """Early-exit CNN classifier for long-tailed data.

    X must be 4-D (n, C, H, W) or 2-D (n, d) with input_dims given. Labels
    must be integers 0..c-1. predict honors the inference threshold, so
    easy examples are classified by early heads at a lower FLOP cost.
    """

    def __init__(
        self,
        num_exits=3,
        widths=(16, 32, 64),
        input_dims=None,
        loss="ce",
        beta=0.9999,
        gamma=0.5,
        max_margin=0.5,
        drw_epoch=None,
        train_threshold=None,
        infer_threshold=0.5,
        epochs=40,
        batch_size=64,
        lr=0.1,
        lr_decay=(),
        warmup_epochs=5,
        weight_decay=2e-4,
        momentum=0.9,
        seed=0,
    ):
        self.num_exits = num_exits
        self.widths = widths
        self.input_dims = input_dims
        self.loss = loss
        self.beta = beta
        self.gamma = gamma
        self.max_margin = max_margin
        self.drw_epoch = drw_epoch
        self.train_threshold = train_threshold
        self.infer_threshold = infer_threshold
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.seed = seed

    def _as_images(self, X):
        X = np.asarray(X)
        if X.ndim == 2:
            if self.input_dims is None:
                raise ConfigurationError("2-D X requires input_dims=(C, H, W)")
            return X.reshape(len(X), *self.input_dims)
        if X.ndim != 4:
            raise ConfigurationError(f"X must be 2-D or 4-D, got shape {X.shape}")
        return X

    def _config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_decay=tuple(self.lr_decay),
            warmup_epochs=self.warmup_epochs,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            seed=self.seed,
            loss=self.loss,
            beta=self.beta,
            gamma=self.gamma,
            max_margin=self.max_margin,
            drw_epoch=self.drw_epoch,
            train_threshold=self.train_threshold,
            infer_threshold=self.infer_threshold,
        )

    def fit(self, X, y):
        X = self._as_images(X)
        y = np.asarray(y, dtype=np.int64)
        self.classes_ = np.unique(y)
        c = int(y.max()) + 1
        counts = np.bincount(y, minlength=c)
        ds = LongTailedDataset(X, y, counts)
        net = build_network(
            c, X.shape[1:], self.num_exits, tuple(self.widths), self.seed
        )
        self.result_ = train(net, ds, self._config())
        self.net_ = self.result_.net
        config = self._config()
        self.policy_ = ExitPolicy.uniform(
            self.num_exits,
            config.resolved_train_threshold(c),
            self.infer_threshold,
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        preds, _, _ = route_predict(self._as_images(X).astype(np.float64), self.net_, self.policy_)
        return preds

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        _, probs, _ = route_predict(self._as_images(X).astype(np.float64), self.net_, self.policy_)
        return probs
