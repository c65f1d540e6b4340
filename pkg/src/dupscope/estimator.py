"""scikit-learn style estimator over the pair model.

X is an array of image pairs [n, 2, 3, H, W] in [0, 1]; y an array of mask
pairs [n, 2, 1, H, W] (or [n, 2, H, W]) in {0, 1}. ``fit`` trains the
underlying model, ``predict_proba`` returns per-pixel tampering
probabilities, ``predict`` thresholds them, and ``score`` is the pooled
pixel-level Matthews correlation. Hyperparameters follow the constructor-
stores-verbatim convention, so ``get_params``/``set_params``/``clone``
behave as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .metrics import confusion_from_maps, mcc
from .model import ModelConfig, PairModel, evaluate_loss_and_masks, train
from .tensor import Tensor


def check_pair_images(X, image_size=None):
    """Validate an [n,2,3,H,W] float array of image pairs in [0,1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 5 or X.shape[1] != 2 or X.shape[2] != 3:
        raise ValueError(f"expected X with shape [n,2,3,H,W], got {X.shape}")
    if X.shape[3] != X.shape[4]:
        raise ValueError(f"images must be square, got {X.shape[3]}x{X.shape[4]}")
    if image_size is not None and X.shape[3] != image_size:
        raise ValueError(f"expected image size {image_size}, got {X.shape[3]}")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_pair_masks(y, X):
    """Validate mask pairs against X; returns [n,2,1,H,W] in {0,1}."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 4:
        y = y[:, :, None]
    if y.shape != (X.shape[0], 2, 1, X.shape[3], X.shape[4]):
        raise ValueError(f"expected y with shape [n,2,1,H,W] matching X, got {y.shape}")
    uniq = np.unique(y)
    if not np.isin(uniq, (0.0, 1.0)).all():
        raise ValueError("masks must be binary")
    return y


class DuplicationLocalizer(BaseEstimator):
    """Localize duplicated regions across image pairs.

    Parameters mirror the model configuration; see ``ModelConfig``. The
    fitted attributes are ``model_`` (trained weights), ``config_`` and
    ``history_`` (per-epoch training log).
    """

    def __init__(
        self,
        image_size=64,
        patch_size=8,
        embed_dim=32,
        encoder_depth=2,
        heads=4,
        ssm_state_dim=8,
        sigma=0.5,
        alpha=5.0,
        topk=8,
        lr=1e-4,
        epochs=30,
        batch_size=8,
        weight_decay=0.01,
        seed=0,
        threshold=0.5,
        validation_fraction=0.1,
        loss_weights=(0.25, 0.25, 0.5),
        rope_enabled=True,
        affinity_guided_cross=True,
    ):
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.encoder_depth = encoder_depth
        self.heads = heads
        self.ssm_state_dim = ssm_state_dim
        self.sigma = sigma
        self.alpha = alpha
        self.topk = topk
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed
        self.threshold = threshold
        self.validation_fraction = validation_fraction
        self.loss_weights = loss_weights
        self.rope_enabled = rope_enabled
        self.affinity_guided_cross = affinity_guided_cross

    # -- sklearn API ----------------------------------------------------------

    def _build_config(self):
        return ModelConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            encoder_depth=self.encoder_depth,
            heads=self.heads,
            ssm_state_dim=self.ssm_state_dim,
            sigma=self.sigma,
            alpha=self.alpha,
            topk=self.topk,
            lr=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            seed=self.seed,
            loss_weights=tuple(self.loss_weights),
            rope_enabled=self.rope_enabled,
            affinity_guided_cross=self.affinity_guided_cross,
        )

    def fit(self, X, y):
        X = check_pair_images(X, self.image_size)
        y = check_pair_masks(y, X)
        cfg = self._build_config()
        samples = [
            (X[i, 0], X[i, 1], y[i, 0], y[i, 1]) for i in range(X.shape[0])
        ]
        n_val = int(round(len(samples) * self.validation_fraction))
        val, tr = samples[:n_val], samples[n_val:]
        model = PairModel(cfg)
        result = train(model, tr, val)
        self.model_ = model
        self.config_ = cfg
        self.history_ = result.history
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("fit must be called before prediction")

    def predict_proba(self, X):
        """Per-pixel tampering probabilities, shape [n,2,1,H,W]."""
        self._require_fitted()
        X = check_pair_images(X, self.image_size)
        dtype = self.config_.np_dtype
        outs = []
        bs = self.config_.batch_size
        for start in range(0, X.shape[0], bs):
            xb = X[start : start + bs]
            out = self.model_.forward(
                Tensor(xb[:, 0].astype(dtype)), Tensor(xb[:, 1].astype(dtype))
            )
            outs.append(np.stack([out["o1"].numpy(), out["o2"].numpy()], axis=1))
        return np.concatenate(outs)

    def predict(self, X):
        """Binary masks at the configured threshold, shape [n,2,1,H,W]."""
        return (self.predict_proba(X) >= self.threshold).astype(np.float64)

    def score(self, X, y):
        """Pooled pixel-level Matthews correlation coefficient."""
        self._require_fitted()
        X = check_pair_images(X, self.image_size)
        y = check_pair_masks(y, X)
        probs = self.predict_proba(X)
        return mcc(confusion_from_maps(probs.ravel(), y.ravel(), self.threshold))
