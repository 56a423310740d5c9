"""Training loop: SGD with momentum, warm-up + cosine schedule, checkpoints and convergence epochs."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, DataError, ModelConfig, NumericError, TrainConfig, to_dict
from .data import load_split, resize_sample
from .inference import predict_samples, to_batch
from .losses import LossBreakdown, assign_targets, count_pixels, detection_loss, seg_class_weights, seg_weighted_ce, total_loss
from .metrics import evaluate_predictions
from .model import save_checkpoint
from .network import init_model, param_groups

log = logging.getLogger(__name__)


def lr_at(epoch, cfg: TrainConfig) -> float:
    """Learning rate at a (fractional) epoch: linear warm-up, then cosine decay to ``min_lr``."""
    t = float(epoch)
    if not 0 <= t <= cfg.total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    if cfg.warmup_epochs > 0 and t < cfg.warmup_epochs:
        return cfg.initial_lr + (cfg.max_lr - cfg.initial_lr) * t / cfg.warmup_epochs
    span = cfg.total_epochs - cfg.warmup_epochs
    if t == cfg.total_epochs:
        return cfg.min_lr
    progress = (t - cfg.warmup_epochs) / span
    return cfg.min_lr + (cfg.max_lr - cfg.min_lr) * (1 + math.cos(math.pi * progress)) / 2


def convergence_epoch(series):
    """First 1-based epoch reaching 99.9% of the final value and staying within 0.2% of it."""
    values = [float(v) for v in series]
    if not values:
        raise DataError("convergence_epoch needs a non-empty series")
    final = values[-1]
    if final <= 0:
        return None
    band = 0.002 * final
    # walk backwards: the answer is the earliest epoch of the trailing in-band run that also reaches the threshold
    answer = None
    for e in range(len(values) - 1, -1, -1):
        if abs(values[e] - final) > band:
            break
        if values[e] >= 0.999 * final:
            answer = e + 1
    return answer


@dataclass
class EpochRecord:
    epoch: int
    losses: dict
    lr: float
    val_iou: float | None = None
    val_map50: float | None = None


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    convergence_epoch_iou: int | None = None
    convergence_epoch_map: int | None = None
    seconds: float = 0.0
    class_weights: list = field(default_factory=list)
    dropped_targets: int = 0

    def loss_series(self, key="total"):
        return [r.losses[key] for r in self.records]

    def to_dict(self):
        return {
            "records": [asdict(r) for r in self.records],
            "convergence_epoch_iou": self.convergence_epoch_iou,
            "convergence_epoch_map": self.convergence_epoch_map,
            "seconds": self.seconds,
            "class_weights": self.class_weights,
            "dropped_targets": self.dropped_targets,
        }


def _fit_size(samples, size):
    return [s if tuple(s.mask.shape) == tuple(size) else resize_sample(s, size) for s in samples]


def _convergence(records, key):
    pts = [(r.epoch, getattr(r, key)) for r in records if getattr(r, key) is not None]
    if not pts:
        return None
    idx = convergence_epoch([v for _, v in pts])
    return None if idx is None else pts[idx - 1][0]


class Trainer:
    """Owns a model and optimizer for one run; ``fit`` trains for ``total_epochs``."""

    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, model=None, dtype=torch.float32):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        torch.manual_seed(train_cfg.seed)
        self.model = model if model is not None else init_model(model_cfg)
        self.model.to(dtype)
        self.dtype = dtype
        decay, no_decay = param_groups(self.model)
        self.decay_params = [p for _, p in decay]
        self.optimizer = torch.optim.SGD(
            [{"params": self.decay_params, "decay": True}, {"params": [p for _, p in no_decay], "decay": False}],
            lr=train_cfg.initial_lr,
            momentum=train_cfg.momentum,
        )

    def set_lr(self, lr):
        for g in self.optimizer.param_groups:
            g["lr"] = lr

    def step(self, images, masks, targets, weights, ids=(), step_no=0):
        """One optimizer step; returns the float loss breakdown."""
        self.model.train()
        logits, det = self.model(images)
        seg = seg_weighted_ce(logits, masks, weights)
        parts = detection_loss(det, targets, obj_target=self.cfg.obj_target, obj_balance=self.cfg.obj_balance)
        parts.seg = seg
        try:
            loss = total_loss(seg, parts)
        except NumericError as exc:
            raise NumericError(f"step {step_no}, batch {list(ids)}: {exc}; breakdown {parts.as_floats()}") from None
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        lr = self.optimizer.param_groups[0]["lr"]
        if self.cfg.weight_decay:
            with torch.no_grad():
                for p in self.decay_params:
                    p.mul_(1 - lr * self.cfg.weight_decay)
        self.optimizer.step()
        return parts.as_floats()

    def fit(self, train_samples, val_samples=(), checkpoint_dir=None, metrics_log=None):
        cfg = self.cfg
        size = self.model_cfg.input_size
        train_samples = _fit_size(list(train_samples), size)
        val_samples = _fit_size(list(val_samples), size)
        if not train_samples:
            raise DataError("training split is empty")
        counts = count_pixels([s.mask for s in train_samples], self.model_cfg.num_seg_classes)
        weights = seg_class_weights(counts)
        targets = [
            assign_targets(s.boxes, size, self.model_cfg.det_levels, cfg.level_thresholds) for s in train_samples
        ]
        report = TrainReport(class_weights=weights.weights.tolist(), dropped_targets=sum(len(t.dropped) for t in targets))
        images = to_batch(train_samples, self.dtype)
        masks = torch.from_numpy(np.stack([s.mask for s in train_samples]).astype(np.int64))
        gen = torch.Generator().manual_seed(cfg.seed)
        n = len(train_samples)
        steps_per_epoch = math.ceil(n / cfg.batch_size)
        ckpt = Path(checkpoint_dir) if checkpoint_dir else None
        if ckpt:
            ckpt.mkdir(parents=True, exist_ok=True)
        log_fh = open(metrics_log, "w") if metrics_log else None
        best = -1.0
        start = time.perf_counter()
        step_no = 0
        try:
            for epoch in range(cfg.total_epochs):
                order = torch.randperm(n, generator=gen)
                sums = {}
                lr = lr_at(epoch, cfg)
                for b in range(steps_per_epoch):
                    if cfg.lr_per_step:
                        lr = lr_at(epoch + b / steps_per_epoch, cfg)
                    self.set_lr(lr)
                    idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                    ids = [train_samples[i].id for i in idx]
                    parts = self.step(images[idx], masks[idx], [targets[i] for i in idx], weights, ids, step_no)
                    step_no += 1
                    for k, v in parts.items():
                        sums[k] = sums.get(k, 0.0) + v
                    if log_fh:
                        log_fh.write(json.dumps({"step": step_no, **parts, "lr": lr}) + "\n")
                rec = EpochRecord(epoch + 1, {k: v / steps_per_epoch for k, v in sums.items()}, lr)
                if val_samples and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.total_epochs):
                    m = self.evaluate(val_samples)
                    rec.val_iou, rec.val_map50 = m.wall_iou, m.map50
                    if ckpt and rec.val_iou + rec.val_map50 > best:
                        best = rec.val_iou + rec.val_map50
                        save_checkpoint(self.model, ckpt / "best.pt", {"epoch": rec.epoch})
                report.records.append(rec)
                log.info("epoch %d loss %.4f lr %.2e", rec.epoch, rec.losses["total"], lr)
        finally:
            if log_fh:
                log_fh.close()
        if ckpt:
            save_checkpoint(self.model, ckpt / "last.pt", {"epoch": cfg.total_epochs})
        report.seconds = time.perf_counter() - start
        report.convergence_epoch_iou = _convergence(report.records, "val_iou")
        report.convergence_epoch_map = _convergence(report.records, "val_map50")
        return report

    def evaluate(self, samples):
        samples = _fit_size(list(samples), self.model_cfg.input_size)
        preds = predict_samples(self.model, samples, self.cfg.conf_threshold, self.cfg.nms_iou)
        return evaluate_predictions(
            preds, samples, self.model_cfg.num_seg_classes, self.model_cfg.num_det_classes,
            self.cfg.conf_threshold, self.cfg.nms_iou,
        )


def train_run(model_cfg: ModelConfig, train_cfg: TrainConfig, data_root, out_dir=None):
    """Train on ``<data_root>/train``, evaluating on ``<data_root>/val``.

    Writes checkpoints, the per-step metrics log and ``report.json`` under
    ``out_dir`` (default: ``train_cfg.checkpoint_dir``). Returns the
    :class:`TrainReport` and the trained model.
    """
    out = Path(out_dir or train_cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = load_split(data_root, "train")
    val = load_split(data_root, "val")
    trainer = Trainer(model_cfg, train_cfg)
    report = trainer.fit(train, val, checkpoint_dir=out, metrics_log=out / "metrics.jsonl")
    payload = report.to_dict()
    payload["config"] = {"model": to_dict(model_cfg), "train": to_dict(train_cfg)}
    (out / "report.json").write_text(json.dumps(payload, indent=2))
    return report, trainer.model
