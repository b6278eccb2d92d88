"""scikit-learn compatible wrappers.

``MobileNetClassifier`` trains the network with any learning strategy behind
the usual ``fit``/``predict``/``predict_proba`` API, ``LetterboxTransformer``
turns raw grayscale images into model input, and ``StratifiedDealKFold``
exposes the fold planner as a CV splitter, so all three drop into
``Pipeline`` and ``cross_val_score``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .data import CANVAS, CONTRAST_THRESHOLD, AugmentConfig, check_contrast, plan_folds, preprocess
from .harness import Hyperparams, predict, train
from .model import MOBILENET_V2_BLOCKS, ModelConfig, StrategyConfig, apply_strategy, build_model
from .weights import save_weights


def check_images(X, channels=None) -> np.ndarray:
    """Validate a batch of images as float32 [N, C, H, W] (accepts [N, H, W])."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped [N, H, W] or [N, C, H, W], got {X.shape}")
    if channels is not None and X.shape[1] not in (1, channels):
        raise ValueError(f"expected 1 or {channels} channels, got {X.shape[1]}")
    return X


class LetterboxTransformer(TransformerMixin, BaseEstimator):
    """Letterbox raw 8-bit grayscale images onto a black square canvas."""

    def __init__(self, size=CANVAS, channels=1):
        self.size = size
        self.channels = channels

    def fit(self, X, y=None):
        self.size_ = tuple(int(v) for v in np.broadcast_to(self.size, (2,)))
        return self

    def transform(self, X):
        check_is_fitted(self, "size_")
        if len(X) == 0:
            raise ValueError("no images to transform")
        return np.stack([preprocess(np.asarray(img), self.size_, self.channels) for img in X])

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.two_d_array = False
        return tags


class ContrastFilter(BaseEstimator):
    """Boolean keep-mask for raw images under the percentile-span contrast rule."""

    def __init__(self, threshold=CONTRAST_THRESHOLD):
        self.threshold = threshold

    def fit(self, X=None, y=None):
        return self

    def mask(self, X) -> np.ndarray:
        return np.array([check_contrast(np.asarray(img), self.threshold) for img in X], dtype=bool)


class MobileNetClassifier(ClassifierMixin, BaseEstimator):
    """Depthwise-separable CNN classifier with selectable learning strategy.

    ``strategy`` is ``"scratch"``, ``"offtheshelf"`` or ``"finetune:K"``; the
    last two need ``pretrained_weights`` (an SNWT file). ``input_size=None``
    takes the spatial size from the training images.
    """

    def __init__(
        self,
        input_size=None,
        input_channels=3,
        block_specs=MOBILENET_V2_BLOCKS,
        head_units=2500,
        dropout_rate=0.5,
        width_multiplier=1.0,
        stem_channels=32,
        last_channels=1280,
        strategy="scratch",
        pretrained_weights=None,
        optimizer="adam",
        learning_rate=1e-3,
        batch_size=32,
        epochs=10,
        augment=True,
        max_rotation_degrees=10.0,
        max_shift_pixels=20,
        random_state=0,
    ):
        self.input_size = input_size
        self.input_channels = input_channels
        self.block_specs = block_specs
        self.head_units = head_units
        self.dropout_rate = dropout_rate
        self.width_multiplier = width_multiplier
        self.stem_channels = stem_channels
        self.last_channels = last_channels
        self.strategy = strategy
        self.pretrained_weights = pretrained_weights
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.augment = augment
        self.max_rotation_degrees = max_rotation_degrees
        self.max_shift_pixels = max_shift_pixels
        self.random_state = random_state

    def _model_config(self, X, n_classes) -> ModelConfig:
        size = self.input_size or X.shape[2:]
        return ModelConfig(
            input_size=tuple(size),
            input_channels=self.input_channels,
            block_specs=tuple(self.block_specs),
            head_units=self.head_units,
            dropout_rate=self.dropout_rate,
            num_classes=n_classes,
            width_multiplier=self.width_multiplier,
            stem_channels=self.stem_channels,
            last_channels=self.last_channels,
        )

    def fit(self, X, y):
        X = check_images(X, self.input_channels)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        config = self._model_config(X, len(self.classes_))
        if tuple(X.shape[2:]) != config.input_size:
            raise ValueError(f"images are {X.shape[2:]}, model expects {config.input_size}")
        seed = 0 if self.random_state is None else int(self.random_state)
        weights = None if self.strategy == "scratch" else self.pretrained_weights
        strategy = StrategyConfig.parse(self.strategy, weights)
        self.model_ = apply_strategy(build_model(config, seed), strategy)
        h = Hyperparams(self.optimizer, self.learning_rate, self.batch_size, self.epochs, seed)
        aug = AugmentConfig(self.max_rotation_degrees, self.max_shift_pixels, bool(self.augment))
        self.loss_curve_ = train(self.model_, (X, y_idx), h, aug).losses
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.input_channels)
        if X.shape[1] != self.input_channels:
            X = np.repeat(X, self.input_channels, axis=1)
        return self.model_.predict_proba(X)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[predict(self.model_, check_images(X, self.input_channels))]

    def save_weights(self, path):
        check_is_fitted(self, "model_")
        save_weights(self.model_, path)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.two_d_array = False
        tags.non_deterministic = False
        return tags


class StratifiedDealKFold:
    """CV splitter over :func:`xraynet.data.plan_folds` (seeded, stratified round-robin)."""

    def __init__(self, n_splits=10, random_state=0):
        self.n_splits = n_splits
        self.random_state = random_state

    def get_n_splits(self, X=None, y=None, groups=None):
        return self.n_splits

    def split(self, X, y, groups=None):
        plan = plan_folds(np.unique(np.asarray(y), return_inverse=True)[1], self.n_splits, self.random_state)
        for f in range(self.n_splits):
            yield plan.train_indices(f), plan.test_indices(f)
