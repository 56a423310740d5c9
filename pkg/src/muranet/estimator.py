"""scikit-learn style front end: ``MuraNet().fit(samples).predict(images)``."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .config import ModelConfig, ShapeError, TrainConfig
from .data import Sample, load_split
from .inference import predict_images
from .metrics import evaluate_predictions
from .model import load_checkpoint, save_checkpoint
from .train import Trainer, _fit_size


def check_images(X, input_size=None, dtype=torch.float32):
    """Coerce images to an (N, 3, H, W) float tensor in [0, 1].

    Accepts a list of :class:`Sample`, a single image, or a stacked array in
    channel-first or channel-last layout; uint8 input is scaled by 1/255.
    """
    if isinstance(X, Sample):
        X = [X]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], Sample):
        if input_size is not None:
            X = _fit_size(list(X), input_size)
        arr = np.stack([s.image for s in X])
    else:
        arr = X.detach().cpu().numpy() if torch.is_tensor(X) else np.asarray(X)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4:
            raise ShapeError(f"expected images of rank 3 or 4, got shape {arr.shape}")
        if arr.shape[1] != 3 and arr.shape[-1] == 3:
            arr = arr.transpose(0, 3, 1, 2)
        if arr.shape[1] != 3:
            raise ShapeError(f"expected 3 colour channels, got shape {arr.shape}")
        if arr.dtype == np.uint8:
            arr = arr / 255.0
    if not np.isfinite(arr).all():
        raise ValueError("images contain non-finite values")
    h, w = arr.shape[-2:]
    if h % 32 or w % 32:
        raise ShapeError(f"input size not divisible by 32: {(h, w)}")
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def check_samples(X):
    """Accept a list of samples or a dataset root (its ``train`` split is used)."""
    if isinstance(X, (str, Path)):
        X = load_split(X, "train")
    X = list(X)
    if not X or not all(isinstance(s, Sample) for s in X):
        raise ValueError("expected a non-empty list of Sample objects or a dataset root")
    return X


class MuraNet(BaseEstimator):
    """Joint wall segmentation and door/window detection.

    Hyperparameters mirror :class:`ModelConfig` and :class:`TrainConfig`;
    ``get_params``/``set_params``/``clone`` work as for any scikit-learn
    estimator. ``fit`` takes samples (images, masks and boxes together), so
    ``y`` is ignored.
    """

    def __init__(
        self,
        input_size=(128, 128),
        stage_channels=(32, 64, 160, 256),
        stage_depths=(2, 2, 2, 2),
        mura_convs=3,
        mura_enabled=True,
        mlp_ratio=4.0,
        num_seg_classes=2,
        num_det_classes=2,
        head_hidden=256,
        decoupled_head=True,
        spp_enabled=False,
        det_levels=(8, 16, 32),
        decoder_channels=(128, 64, 48, 32),
        batch_size=4,
        max_lr=0.1,
        initial_lr=0.0001,
        min_lr=0.000001,
        weight_decay=0.0005,
        momentum=0.937,
        total_epochs=200,
        warmup_epochs=5,
        obj_balance=True,
        conf_threshold=0.25,
        nms_iou=0.45,
        random_state=0,
    ):
        self.input_size = input_size
        self.stage_channels = stage_channels
        self.stage_depths = stage_depths
        self.mura_convs = mura_convs
        self.mura_enabled = mura_enabled
        self.mlp_ratio = mlp_ratio
        self.num_seg_classes = num_seg_classes
        self.num_det_classes = num_det_classes
        self.head_hidden = head_hidden
        self.decoupled_head = decoupled_head
        self.spp_enabled = spp_enabled
        self.det_levels = det_levels
        self.decoder_channels = decoder_channels
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.initial_lr = initial_lr
        self.min_lr = min_lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.total_epochs = total_epochs
        self.warmup_epochs = warmup_epochs
        self.obj_balance = obj_balance
        self.conf_threshold = conf_threshold
        self.nms_iou = nms_iou
        self.random_state = random_state

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_size=self.input_size,
            stage_channels=self.stage_channels,
            stage_depths=self.stage_depths,
            mura_convs=self.mura_convs,
            mura_enabled=self.mura_enabled,
            mlp_ratio=self.mlp_ratio,
            num_seg_classes=self.num_seg_classes,
            num_det_classes=self.num_det_classes,
            head_hidden=self.head_hidden,
            decoupled_head=self.decoupled_head,
            spp_enabled=self.spp_enabled,
            det_levels=self.det_levels,
            decoder_channels=self.decoder_channels,
            seed=self.random_state,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            max_lr=self.max_lr,
            initial_lr=self.initial_lr,
            min_lr=self.min_lr,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            total_epochs=self.total_epochs,
            warmup_epochs=self.warmup_epochs,
            eval_every=max(1, self.total_epochs),
            obj_balance=self.obj_balance,
            conf_threshold=self.conf_threshold,
            nms_iou=self.nms_iou,
            seed=self.random_state,
        )

    def fit(self, X, y=None, validation=()):
        samples = check_samples(X)
        trainer = Trainer(self.model_config(), self.train_config())
        self.report_ = trainer.fit(samples, validation)
        self.model_ = trainer.model.eval()
        self.class_weights_ = np.asarray(self.report_.class_weights)
        return self

    def _images(self, X):
        check_is_fitted(self, "model_")
        return check_images(X, self.model_.config.input_size, next(self.model_.parameters()).dtype)

    def predict(self, X):
        """List of ``(mask, detections)`` per image."""
        images = self._images(X)
        out = []
        for i in range(0, len(images), 8):
            out.extend(predict_images(self.model_, images[i : i + 8], self.conf_threshold, self.nms_iou))
        return out

    def predict_mask(self, X):
        return np.stack([m for m, _ in self.predict(X)])

    def transform(self, X):
        """Backbone pyramid features ``{stride: array}`` for a batch of images."""
        images = self._images(X)
        self.model_.eval()
        with torch.no_grad():
            feats = self.model_.backbone(images)
        return {s: f.numpy() for s, f in feats.items()}

    def evaluate(self, X):
        samples = _fit_size(check_samples(X), self.model_config().input_size)
        preds = self.predict(samples)
        return evaluate_predictions(
            preds, samples, self.num_seg_classes, self.num_det_classes, self.conf_threshold, self.nms_iou
        )

    def score(self, X, y=None):
        """Wall IoU on ``X``."""
        return self.evaluate(X).wall_iou

    def save(self, path):
        check_is_fitted(self, "model_")
        save_checkpoint(self.model_, path, {"estimator": self.get_params()})

    @classmethod
    def from_checkpoint(cls, path, **params):
        model = load_checkpoint(path)
        cfg = model.config
        est = cls(
            input_size=cfg.input_size,
            stage_channels=cfg.stage_channels,
            stage_depths=cfg.stage_depths,
            mura_convs=cfg.mura_convs,
            mura_enabled=cfg.mura_enabled,
            mlp_ratio=cfg.mlp_ratio,
            num_seg_classes=cfg.num_seg_classes,
            num_det_classes=cfg.num_det_classes,
            head_hidden=cfg.head_hidden,
            decoupled_head=cfg.decoupled_head,
            spp_enabled=cfg.spp_enabled,
            det_levels=cfg.det_levels,
            decoder_channels=cfg.decoder_channels,
            random_state=cfg.seed,
            **params,
        )
        est.model_ = model.eval()
        return est


__all__ = ["MuraNet", "NotFittedError", "check_images", "check_samples"]
