"""scikit-learn style wrapper around the joint trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .geometry import DESK_ANCHORS, AnchorSpec, Proposal, Region
from .synthdata import Sample
from .trainer import NTSModel, TrainConfig, train


def _as_images(X, side: int) -> np.ndarray:
    """Validate an (n, H, W) or (n, H, W, C) stack of square images of the given side."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, :, :, None]
    if X.ndim != 4 or X.shape[1:3] != (side, side):
        raise ValueError(f"expected images of shape (n, {side}, {side}[, C]), got {X.shape}")
    return X


class NTSClassifier(ClassifierMixin, BaseEstimator):
    """Navigator-teacher-scrutinizer image classifier.

    ``fit`` takes an image stack and labels; region proposals are learned
    without box supervision. ``propose`` exposes the navigator's ranked
    regions for fitted models.
    """

    def __init__(
        self,
        n_regions: int = 6,
        n_scrutinized: int = 2,
        lam: float = 1.0,
        mu: float = 1.0,
        nms_threshold: float = 0.25,
        anchors: AnchorSpec | None = None,
        region_side: int = 32,
        channels: tuple[int, ...] = (16, 32, 64, 128),
        navigator_channels: int = 64,
        teacher_hidden: int = 128,
        batch_norm: bool = True,
        navigation_loss: bool = True,
        epochs: int = 12,
        batch_size: int = 16,
        lr: float = 0.001,
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
        random_state: int = 0,
    ):
        self.n_regions = n_regions
        self.n_scrutinized = n_scrutinized
        self.lam = lam
        self.mu = mu
        self.nms_threshold = nms_threshold
        self.anchors = anchors
        self.region_side = region_side
        self.channels = channels
        self.navigator_channels = navigator_channels
        self.teacher_hidden = teacher_hidden
        self.batch_norm = batch_norm
        self.navigation_loss = navigation_loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        spec = self.anchors if self.anchors is not None else DESK_ANCHORS
        return TrainConfig(
            n_regions=self.n_regions,
            n_scrutinized=self.n_scrutinized,
            lam=self.lam,
            mu=self.mu,
            nms_threshold=self.nms_threshold,
            anchors=spec,
            input_side=spec.input_size,
            region_side=self.region_side,
            channels=tuple(self.channels),
            navigator_channels=self.navigator_channels,
            teacher_hidden=self.teacher_hidden,
            batch_norm=self.batch_norm,
            navigation_loss_enabled=self.navigation_loss,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.random_state,
        )

    def fit(self, X, y):
        config = self._train_config()
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        check_classification_targets(y)
        images = _as_images(X, config.input_side)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        full = Region.full_image(config.input_side, config.input_side)
        samples = [Sample(img, int(c), full) for img, c in zip(images, encoded)]
        result = train(samples, config, n_classes=len(self.classes_))
        self.model_ = NTSModel(config, len(self.classes_), images.shape[-1])
        self.params_ = result.params
        self.history_ = result.history
        return self

    def _images(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, allow_nd=True, dtype=np.float32)
        return _as_images(X, self.model_.config.input_side)

    def _infer(self, X):
        images = self._images(X)
        bs = self.model_.config.eval_batch_size
        probs, proposals, region_probs = [], [], []
        for i in range(0, len(images), bs):
            p, props, rp = self.model_.infer(self.params_, images[i : i + bs])
            probs.append(p)
            proposals.extend(props)
            region_probs.extend(rp)
        return np.concatenate(probs), proposals, region_probs

    def predict_proba(self, X) -> np.ndarray:
        return self._infer(X)[0]

    def predict(self, X) -> np.ndarray:
        probs = self.predict_proba(X)
        return self.classes_[np.argmax(probs, axis=1)]

    def propose(self, X) -> list[list[Proposal]]:
        """Top-M proposals per image with teacher confidence for the predicted class."""
        probs, proposals, region_probs = self._infer(X)
        for p_img, props, rp in zip(probs, proposals, region_probs):
            cls = int(np.argmax(p_img))
            for p, row in zip(props, rp):
                p.confidence = float(row[cls])
        return proposals
