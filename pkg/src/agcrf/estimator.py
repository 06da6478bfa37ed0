"""Scikit-learn style front door for the contour detector.

``ContourDetector`` wraps model construction, the training loop, and fused
inference behind the familiar fit/predict/score surface so the detector
drops into sklearn tooling (clone, get_params, grid search).  X is an array
of images, y an array of binary edge masks.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .evaluation import DEFAULT_TOLERANCE, evaluate, nms_thin
from .network import ABLATIONS, ContourNet, ModelConfig
from .tensor import Tensor
from .training import TrainConfig, train_loop


def _as_image_stack(X, channels: int) -> list[np.ndarray]:
    """Normalize input to a list of (C, H, W) float arrays."""
    if isinstance(X, np.ndarray) and X.ndim in (3, 4):
        items = list(X)
    elif isinstance(X, (list, tuple)):
        items = [np.asarray(x) for x in X]
    else:
        raise ValueError("X must be an array of shape (n, H, W) or (n, C, H, W), "
                         "or a sequence of such images")
    out = []
    for i, img in enumerate(items):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[np.newaxis]
        if img.ndim != 3 or img.shape[0] != channels:
            raise ValueError(f"image {i}: expected {channels}-channel (C, H, W) or "
                             f"(H, W) data, got shape {img.shape}")
        if not np.isfinite(img).all():
            raise ValueError(f"image {i} contains non-finite values")
        out.append(img)
    return out


def _as_mask_stack(y, n: int) -> list[np.ndarray]:
    if isinstance(y, np.ndarray) and y.ndim == 3:
        items = list(y)
    elif isinstance(y, (list, tuple)):
        items = [np.asarray(m) for m in y]
    else:
        raise ValueError("y must be an array of shape (n, H, W) or a sequence of masks")
    if len(items) != n:
        raise ValueError(f"{n} images but {len(items)} masks")
    out = []
    for i, m in enumerate(items):
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError(f"mask {i}: expected 2-d binary mask, got shape {m.shape}")
        if not np.isin(m, (0.0, 1.0)).all():
            raise ValueError(f"mask {i} is not binary")
        out.append(m)
    return out


class ContourDetector(BaseEstimator):
    """Trainable contour detector with gated multi-scale fusion.

    Parameters mirror the model and optimizer configs; see ModelConfig and
    TrainConfig for semantics.  ``ablation`` picks the architecture variant
    (default the fully gated one).
    """

    def __init__(self, ablation: str = "flag", iterations: int = 2000,
                 learning_rate: float = 1e-3, momentum: float = 0.9,
                 weight_decay: float = 2e-4, accumulation: int = 10,
                 image_channels: int = 1,
                 frontend_channels: tuple[int, ...] = (8, 12, 16, 16),
                 frontend_strides: tuple[int, ...] = (2, 2, 2, 2),
                 taps: tuple[int, ...] = (2, 3, 4), branch_channels: int = 8,
                 fuse_channels: int = 8, crf_kernel: int = 3,
                 crf_iterations: int = 1, unary_weight: float = 0.1,
                 gate_sign: float = 1.0, activation: str = "tanh",
                 beta_convention: str = "hed", tol_frac: float = DEFAULT_TOLERANCE,
                 seed: int = 0):
        self.ablation = ablation
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.accumulation = accumulation
        self.image_channels = image_channels
        self.frontend_channels = frontend_channels
        self.frontend_strides = frontend_strides
        self.taps = taps
        self.branch_channels = branch_channels
        self.fuse_channels = fuse_channels
        self.crf_kernel = crf_kernel
        self.crf_iterations = crf_iterations
        self.unary_weight = unary_weight
        self.gate_sign = gate_sign
        self.activation = activation
        self.beta_convention = beta_convention
        self.tol_frac = tol_frac
        self.seed = seed

    # --- config assembly ---------------------------------------------------
    def _model_config(self) -> ModelConfig:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got '{self.ablation}'")
        cfg = ModelConfig(
            ablation=self.ablation, image_channels=self.image_channels,
            frontend_channels=tuple(self.frontend_channels),
            frontend_strides=tuple(self.frontend_strides),
            taps=tuple(self.taps), branch_channels=self.branch_channels,
            fuse_channels=self.fuse_channels, crf_kernel=self.crf_kernel,
            crf_iterations=self.crf_iterations, unary_weight=self.unary_weight,
            gate_sign=self.gate_sign, activation=self.activation)
        cfg.validate()
        return cfg

    def _train_config(self) -> TrainConfig:
        return TrainConfig(iterations=self.iterations,
                           learning_rate=self.learning_rate,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           accumulation=self.accumulation,
                           beta_convention=self.beta_convention, seed=self.seed)

    # --- sklearn surface ----------------------------------------------------
    def fit(self, X, y) -> "ContourDetector":
        """Train from scratch on (images, edge masks); returns self."""
        cfg = self._model_config()
        images = _as_image_stack(X, cfg.image_channels)
        masks = _as_mask_stack(y, len(images))
        for i, (img, m) in enumerate(zip(images, masks)):
            if img.shape[1:] != m.shape:
                raise ValueError(f"sample {i}: image {img.shape[1:]} vs mask {m.shape}")
        model = ContourNet(cfg, np.random.default_rng(self.seed))
        self.history_ = train_loop(list(zip(images, masks)), model, self._train_config())
        self.model_ = model
        return self

    def _require_fitted(self) -> ContourNet:
        if not hasattr(self, "model_"):
            raise NotFittedError("this ContourDetector is not fitted yet; call fit first")
        return self.model_

    def predict(self, X) -> np.ndarray:
        """Fused contour map per image, shape (n, H, W), values in (0, 1)."""
        model = self._require_fitted()
        images = _as_image_stack(X, model.config.image_channels)
        return np.stack([model.forward(Tensor(img)).fused.data[0] for img in images])

    def predict_heads(self, X) -> list[list[np.ndarray]]:
        """All per-head maps for each image (list over images, then heads)."""
        model = self._require_fitted()
        images = _as_image_stack(X, model.config.image_channels)
        return [[h.data[0] for h in model.forward(Tensor(img)).heads] for img in images]

    def transform(self, X) -> np.ndarray:
        return self.predict(X)

    def score(self, X, y) -> float:
        """Dataset ODS of thinned predictions against the given masks."""
        preds = self.predict(X)
        masks = _as_mask_stack(y, len(preds))
        thinned = [nms_thin(p) for p in preds]
        result, _ = evaluate(thinned, masks, tol_frac=self.tol_frac)
        return result.ods
