"""scikit-learn style wrapper around the network and trainer."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data.preprocess import SliceSample
from .losses import LossConfig
from .metrics import aggregate, evaluate_pair
from .model import ModelConfig, build, predict_mask
from .trainer import TrainConfig, train


def check_images(X):
    """Coerce images to float32 ``(n, 1, H, W)`` in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(f"expected images shaped (n, H, W) or (n, 1, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinity")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("image intensities must be normalised to [0, 1]")
    return X


def check_masks(y, X):
    y = np.asarray(y)
    if y.ndim == 4:
        y = y[:, 0]
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"masks shaped {y.shape} do not match images {X.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("masks must be binary")
    return y.astype(np.uint8)


class VcaSegmenter(BaseEstimator):
    """Binary lesion segmenter with ``fit`` / ``predict_proba`` / ``predict`` / ``score``.

    ``X`` holds 2-D slices shaped ``(n, H, W)`` (or ``(n, 1, H, W)``) with
    intensities in [0, 1]; ``y`` holds matching binary masks.  ``H`` and
    ``W`` must be multiples of 8.  ``score`` is the mean slice DSC with
    empty/empty slices counted as perfect matches.
    """

    def __init__(self, c1=64, c2=128, c4=256, t=256, decoder=(256, 128, 64, 32), upsample_kind="nearest",
                 lr=0.001, momentum=0.9, weight_decay=1e-8, batch_size=8, epochs=50, alpha=0.25, gamma=2.0,
                 include_empty_slices=True, threshold=0.5, random_state=0):
        self.c1 = c1
        self.c2 = c2
        self.c4 = c4
        self.t = t
        self.decoder = decoder
        self.upsample_kind = upsample_kind
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.alpha = alpha
        self.gamma = gamma
        self.include_empty_slices = include_empty_slices
        self.threshold = threshold
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        cfg = ModelConfig(
            input_hw=X.shape[2:], c1=self.c1, c2=self.c2, c4=self.c4, t=self.t, decoder=tuple(self.decoder),
            upsample_kind=self.upsample_kind, seed=self.random_state,
        )
        self.net_ = build(cfg)
        samples = [SliceSample(X[k, 0], y[k], "fit", k) for k in range(len(X))]
        tcfg = TrainConfig(
            lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay, batch_size=self.batch_size,
            epochs=self.epochs, seed=self.random_state, loss=LossConfig(alpha=self.alpha, gamma=self.gamma),
            include_empty_slices=self.include_empty_slices, patience=None,
        )
        self.history_ = train(self.net_, samples, None, tcfg)
        self.input_hw_ = tuple(X.shape[2:])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        X = check_images(X)
        out = []
        for start in range(0, len(X), self.batch_size):
            prob, _ = self.net_.forward(X[start : start + self.batch_size], training=False)
            out.append(prob[:, 0])
        return np.concatenate(out)

    def predict(self, X):
        return predict_mask(self.predict_proba(X), self.threshold)

    def score(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        pred = self.predict(X)
        rows = [evaluate_pair(pred[k], y[k]) for k in range(len(y))]
        return aggregate(rows, "count_empty_match_as_one").means["dsc"]
