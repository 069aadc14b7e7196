"""scikit-learn style wrapper around :class:`SacnModel` and :class:`Trainer`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import tensor as T
from .config import override, preset as make_preset
from .model import SacnModel
from .train import Trainer


class SACNClassifier(ClassifierMixin, BaseEstimator):
    """Capsule classifier with an optional self-attention block.

    Parameters
    ----------
    preset : str
        Named configuration to start from.
    mode : {"sacn", "baseline"}
        "baseline" drops the attention block.
    epochs, batch_size, lr, max_steps : optional
        Training overrides; None keeps the preset value.
    seed : int
        Root seed for initialisation and shuffling.
    overrides : dict, optional
        Extra ``section.key -> value`` settings applied last.

    Images may be passed as (n, H, W), (n, C, H, W) or flattened (n, C*H*W);
    the flattened form needs ``overrides`` giving the image geometry.
    """

    def __init__(self, preset: str = "synthetic-simple", mode: str = "sacn", epochs=None,
                 batch_size=None, lr=None, max_steps=None, seed: int = 0, overrides=None):
        self.preset = preset
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.max_steps = max_steps
        self.seed = seed
        self.overrides = overrides

    def _base_config(self):
        updates = {"model.mode": self.mode, "seed": self.seed}
        for key, val in (("train.epochs", self.epochs), ("train.batch_size", self.batch_size),
                         ("train.lr", self.lr), ("train.max_steps", self.max_steps)):
            if val is not None:
                updates[key] = val
        updates.update(self.overrides or {})
        return override(make_preset(self.preset), updates)

    def _as_images(self, X, cfg):
        m = cfg.model
        if X.ndim == 2:
            if X.shape[1] != m.in_channels * m.height * m.width:
                raise ValueError(f"flattened input has {X.shape[1]} features; the configured "
                                 f"geometry {m.in_channels}x{m.height}x{m.width} needs "
                                 f"{m.in_channels * m.height * m.width}")
            return X.reshape(len(X), m.in_channels, m.height, m.width)
        if X.ndim == 3:
            return X[:, None]
        if X.ndim == 4:
            return X
        raise ValueError(f"expected 2-, 3- or 4-d input, got shape {X.shape}")

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        cfg = self._base_config()
        X = self._as_images(X, cfg)
        _, c, h, w = X.shape
        cfg = override(cfg, {"model.in_channels": c, "model.height": h, "model.width": w,
                             "model.n_classes": len(self.classes_)})
        self.config_ = cfg
        self.model_ = SacnModel(cfg)
        self.trainer_ = Trainer(self.model_, timing=False)
        self.trainer_.fit(X, y_enc)
        self.n_features_in_ = c * h * w
        return self

    def _images(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        return self._as_images(X, self.config_)

    def decision_function(self, X):
        """Class-capsule lengths, one column per class."""
        x = self._images(X)
        return self.model_.predict_lengths(x)

    def predict_proba(self, X):
        """Capsule lengths rescaled to sum to one per row."""
        lengths = self.decision_function(X)
        total = lengths.sum(axis=1, keepdims=True)
        return np.divide(lengths, total, out=np.full_like(lengths, 1 / lengths.shape[1]),
                         where=total > 0)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        """Flattened class-capsule pose vectors, shape (n, n_classes * class_dim)."""
        x = self._images(X)
        out = []
        with T.no_grad():
            for start in range(0, len(x), 256):
                v = self.model_.forward(x[start:start + 256]).v.data
                out.append(v.reshape(len(v), -1))
        return np.concatenate(out, axis=0)
