"""scikit-learn style wrapper around network construction, training and inference."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_network, save_checkpoint
from .config import network_from_dict
from .metrics import evaluate
from .network import UCapsNet
from .trainer import Sample, SegDataset, TrainConfig, predict_volume, train

__all__ = ["UCapsSegmenter", "check_volumes", "check_labels"]


def check_volumes(X, in_channels: Optional[int] = None) -> np.ndarray:
    """Coerce ``X`` to float32 ``[n, C, H, W, D]``; ``[n, H, W, D]`` gains a channel axis."""
    X = np.asarray(X)
    if X.ndim == 4:
        X = X[:, None]
    if X.ndim != 5:
        raise ValueError(f"expected volumes [n, H, W, D] or [n, C, H, W, D], got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("got an empty batch of volumes")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"volumes must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("volumes contain NaN or infinity")
    if in_channels is not None and X.shape[1] != in_channels:
        raise ValueError(f"expected {in_channels} channel(s), got {X.shape[1]}")
    return X


def check_labels(y, X: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (X.shape[0], *X.shape[2:]):
        raise ValueError(f"labels {y.shape} do not match volumes {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integer class ids")
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return y.astype(np.uint8)


class UCapsSegmenter(BaseEstimator):
    """Voxel-wise segmenter: ``fit(X, y)`` trains, ``predict(X)`` returns label volumes.

    ``network`` is a dict accepted by the experiment config's network section
    (e.g. ``{"preset": "reduced"}``); the remaining parameters mirror
    :class:`~ucaps.trainer.TrainConfig`.
    """

    def __init__(self, network=None, lr0=1e-4, batch_size=2, patch_size=32,
                 max_iters=1000, eval_interval=50, plateau_patience_iters=500,
                 early_stop_iters=2500, time_budget_s=None, eval_patch_size=None,
                 validation_fraction=0.1, seed=0):
        self.network = network
        self.lr0 = lr0
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.max_iters = max_iters
        self.eval_interval = eval_interval
        self.plateau_patience_iters = plateau_patience_iters
        self.early_stop_iters = early_stop_iters
        self.time_budget_s = time_budget_s
        self.eval_patch_size = eval_patch_size
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr0=self.lr0, batch_size=self.batch_size, patch_size=self.patch_size,
                           max_iters=self.max_iters, eval_interval=self.eval_interval,
                           plateau_patience_iters=self.plateau_patience_iters,
                           early_stop_iters=self.early_stop_iters,
                           time_budget_s=self.time_budget_s,
                           eval_patch_size=self.eval_patch_size, seed=self.seed).validate()

    def fit(self, X, y, X_val=None, y_val=None):
        net_cfg = network_from_dict({"seed": self.seed, **(self.network or {"preset": "reduced"})})
        X = check_volumes(X, net_cfg.in_channels)
        y = check_labels(y, X, net_cfg.num_classes)
        cfg = self._train_config()
        samples = [Sample(x, t) for x, t in zip(X, y)]
        if X_val is not None:
            Xv = check_volumes(X_val, net_cfg.in_channels)
            val = [Sample(x, t) for x, t in zip(Xv, check_labels(y_val, Xv, net_cfg.num_classes))]
            train_set = samples
        else:
            n_val = max(1, int(round(self.validation_fraction * len(samples))))
            if n_val >= len(samples):
                raise ValueError("need at least two volumes when no validation set is given")
            train_set, val = samples[:-n_val], samples[-n_val:]
        self.net_ = UCapsNet(net_cfg)
        result = train(self.net_, SegDataset(train_set, val), cfg)
        self.net_.load_state_dict(result.best_state)
        self.net_.eval()
        self.history_ = result.history
        self.best_val_dice_ = result.state.best_dice
        self.n_iter_ = result.state.iteration
        self.classes_ = np.arange(net_cfg.num_classes)
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities ``[n, K, H, W, D]``."""
        check_is_fitted(self, "net_")
        X = check_volumes(X, self.net_.config.in_channels)
        p = self.eval_patch_size
        return np.stack([predict_volume(self.net_, x, p) for x in X])

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(1).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean foreground Dice averaged over volumes."""
        pred = self.predict(X)
        y = check_labels(y, check_volumes(X), self.net_.config.num_classes)
        k = self.net_.config.num_classes
        return float(np.mean([evaluate(p, t, k).mean_dice for p, t in zip(pred, y)]))

    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        save_checkpoint(path, self.net_.state_dict(), self.net_.config.to_dict(),
                        {"estimator_params": self.get_params()})

    @classmethod
    def load(cls, path) -> "UCapsSegmenter":
        net, meta = load_network(path)
        params = meta.get("extra", {}).get("estimator_params", {})
        est = cls(**params)
        est.net_ = net
        est.classes_ = np.arange(net.config.num_classes)
        return est
