"""Frequency-weighted segmentation loss, detection loss and target assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .config import DataError, NumericError, ShapeError
from .heads import encode_box, grid_boxes

LOG_EPS = math.log(1e-12)


@dataclass
class ClassWeightTable:
    weights: np.ndarray
    pixel_counts: np.ndarray
    total: int

    def as_tensor(self, dtype=torch.float32):
        return torch.as_tensor(self.weights, dtype=dtype)


def seg_class_weights(pixel_counts) -> ClassWeightTable:
    """Weight each class by how many pixels are *not* in it, normalised to sum to one.

    >>> seg_class_weights([80, 20]).weights
    array([0.2, 0.8])
    """
    counts = np.asarray(pixel_counts, dtype=np.int64).ravel()
    if counts.size < 2:
        raise DataError("need pixel counts for at least two classes")
    if (counts < 0).any():
        raise DataError("pixel counts must be non-negative")
    total = int(counts.sum())
    if total <= 0:
        raise DataError("total pixel count must be positive")
    if (counts == total).any():
        raise DataError("degenerate class distribution: every pixel belongs to one class")
    numer = (total - counts).astype(np.float64)
    return ClassWeightTable(numer / numer.sum(), counts, total)


def count_pixels(masks, num_classes) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for m in masks:
        counts += np.bincount(np.asarray(m).ravel(), minlength=num_classes)[:num_classes]
    return counts


def seg_weighted_ce(logits, mask, weights):
    """Pixel-mean of ``-w[y] * log p[y]`` with ``p`` the softmax over classes.

    ``logits`` is (N, C, H, W), ``mask`` (N, H, W) integer labels and
    ``weights`` a :class:`ClassWeightTable` or a length-C sequence.
    """
    if isinstance(weights, ClassWeightTable):
        weights = weights.weights
    w = torch.as_tensor(np.asarray(weights), dtype=logits.dtype, device=logits.device)
    mask = torch.as_tensor(mask, device=logits.device).long()
    if logits.dim() != 4 or mask.shape != (logits.shape[0], *logits.shape[2:]):
        raise ShapeError(f"logits {tuple(logits.shape)} and mask {tuple(mask.shape)} do not match")
    num_classes = logits.shape[1]
    if w.numel() != num_classes:
        raise ShapeError(f"{w.numel()} class weights for {num_classes} classes")
    bad = (mask < 0) | (mask >= num_classes)
    if bad.any():
        n, y, x = (int(v) for v in torch.nonzero(bad)[0])
        raise DataError(f"mask value {int(mask[n, y, x])} out of range at (image {n}, y={y}, x={x})")
    logp = torch.log_softmax(logits, dim=1).clamp_min(LOG_EPS)
    picked = logp.gather(1, mask.unsqueeze(1)).squeeze(1)
    return -(w[mask] * picked).mean()


@dataclass
class Positive:
    row: int
    col: int
    class_id: int
    t: tuple
    box: tuple


@dataclass
class DetTargets:
    """Per-level objectness maps and positive cells for one image."""

    obj: dict  # stride -> (h, w) float array of 0/1
    positives: dict  # stride -> list[Positive]
    dropped: list = field(default_factory=list)

    @property
    def num_positives(self):
        return sum(len(v) for v in self.positives.values())


def route_level(box, levels, thresholds=(64, 128)):
    """Pick the detection stride for a box from its longest side."""
    longest = max(box[2] - box[0], box[3] - box[1])
    if longest < thresholds[0]:
        want = 8
    elif longest < thresholds[1]:
        want = 16
    else:
        want = 32
    if want in levels:
        return want
    # fall back to the closest configured stride
    return min(levels, key=lambda s: (abs(math.log2(s / want)), s))


def assign_targets(boxes, input_size, levels=(8, 16, 32), thresholds=(64, 128)) -> DetTargets:
    """Route each ground-truth ``(class_id, x0, y0, x1, y1)`` to one (level, cell).

    The cell is the one containing the box centre (``floor(c / stride)``).
    When two boxes land in the same cell the larger one is kept and the other
    is reported in ``dropped``.
    """
    h, w = input_size
    obj = {s: np.zeros((h // s, w // s), dtype=np.float32) for s in levels}
    chosen = {s: {} for s in levels}
    dropped = []
    for item in boxes:
        cls, x0, y0, x1, y1 = item
        box = (float(x0), float(y0), float(x1), float(y1))
        if not (box[2] > box[0] and box[3] > box[1]):
            raise DataError(f"zero-area box {box}")
        if box[0] < 0 or box[1] < 0 or box[2] > w or box[3] > h:
            raise DataError(f"box {box} outside image of size {(h, w)}")
        s = route_level(box, levels, thresholds)
        (row, col), _ = encode_box(box, s)
        row = min(row, h // s - 1)
        col = min(col, w // s - 1)
        t = encode_in_cell(box, s, row, col)
        area = (box[2] - box[0]) * (box[3] - box[1])
        pos = Positive(row, col, int(cls), t, box)
        prev = chosen[s].get((row, col))
        if prev is not None:
            prev_area = (prev.box[2] - prev.box[0]) * (prev.box[3] - prev.box[1])
            if area > prev_area:
                dropped.append((prev.class_id, *prev.box))
            else:
                dropped.append((pos.class_id, *pos.box))
                continue
        chosen[s][(row, col)] = pos
        obj[s][row, col] = 1.0
    positives = {s: list(chosen[s].values()) for s in levels}
    return DetTargets(obj, positives, dropped)


def encode_in_cell(box, stride, row, col, eps=1e-9):
    cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
    fx = min(max(cx / stride - col, eps), 1 - eps)
    fy = min(max(cy / stride - row, eps), 1 - eps)
    logit = lambda p: math.log(p) - math.log1p(-p)
    return (logit(fx), logit(fy), math.log((box[2] - box[0]) / stride), math.log((box[3] - box[1]) / stride))


def pairwise_iou(a, b, eps=1e-12):
    """Elementwise IoU of two (n, 4) box tensors; differentiable."""
    iw = (torch.minimum(a[:, 2], b[:, 2]) - torch.maximum(a[:, 0], b[:, 0])).clamp_min(0)
    ih = (torch.minimum(a[:, 3], b[:, 3]) - torch.maximum(a[:, 1], b[:, 1])).clamp_min(0)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a + area_b - inter + eps)


@dataclass
class LossBreakdown:
    seg: torch.Tensor | float = 0.0
    det_bbox: torch.Tensor | float = 0.0
    det_cls: torch.Tensor | float = 0.0
    det_obj: torch.Tensor | float = 0.0

    @property
    def det(self):
        return self.det_bbox + self.det_cls + self.det_obj

    @property
    def total(self):
        return self.seg + self.det_bbox + self.det_cls + self.det_obj

    def as_floats(self):
        f = lambda v: float(v.detach()) if torch.is_tensor(v) else float(v)
        out = {"seg": f(self.seg), "det_bbox": f(self.det_bbox), "det_cls": f(self.det_cls), "det_obj": f(self.det_obj)}
        out["total"] = out["seg"] + out["det_bbox"] + out["det_cls"] + out["det_obj"]
        return out


def detection_loss(pred, targets, obj_target="iou", detach_iou=True, obj_balance=True) -> LossBreakdown:
    """Box (1 - IoU), class BCE and objectness BCE over a batch.

    ``pred`` maps stride -> LevelPrediction for the batch, ``targets`` is one
    :class:`DetTargets` per image. Box and class terms average over positive
    cells. The objectness BCE covers every cell of every level, with the target
    set to the IoU of the decoded box at positives (``obj_target="binary"``
    uses 1 instead) and 0 elsewhere. With ``obj_balance`` the positive and
    negative cells each contribute half of the term; without positives, or
    with ``obj_balance=False``, it is the plain mean over cells.
    """
    batch = len(targets)
    ious, pred_boxes_cls, cls_targets = [], [], []
    obj_maps, pos_maps = [], []
    any_tensor = next(iter(pred.values())).obj
    for stride, lp in pred.items():
        if lp.obj.shape[0] != batch:
            raise ShapeError(f"{lp.obj.shape[0]} predictions for {batch} target sets")
        h, w = lp.obj.shape[-2:]
        obj_t = torch.zeros(batch, h, w, dtype=lp.obj.dtype, device=lp.obj.device)
        pos = torch.zeros(batch, h, w, dtype=torch.bool, device=lp.obj.device)
        b_idx, rows, cols, classes, gts = [], [], [], [], []
        for b, tgt in enumerate(targets):
            if tgt.obj[stride].shape != (h, w):
                raise ShapeError(f"target grid {tgt.obj[stride].shape} != prediction grid {(h, w)} at stride {stride}")
            for p in tgt.positives[stride]:
                b_idx.append(b)
                rows.append(p.row)
                cols.append(p.col)
                classes.append(p.class_id)
                gts.append(p.box)
        if b_idx:
            bi = torch.tensor(b_idx)
            ri = torch.tensor(rows)
            ci = torch.tensor(cols)
            decoded = grid_boxes(lp.box, stride)  # (N, 4, h, w)
            pb = decoded[bi, :, ri, ci]
            gt = torch.tensor(gts, dtype=pb.dtype, device=pb.device)
            iou = pairwise_iou(pb, gt)
            ious.append(iou)
            onehot = F.one_hot(torch.tensor(classes), lp.cls.shape[1]).to(lp.cls.dtype)
            pred_boxes_cls.append(lp.cls[bi, :, ri, ci])
            cls_targets.append(onehot)
            if obj_target == "iou":
                tval = iou.detach().clamp(0, 1) if detach_iou else iou.clamp(0, 1)
            else:
                tval = torch.ones_like(iou)
            obj_t = obj_t.index_put((bi, ri, ci), tval)
            pos[bi, ri, ci] = True
        obj_maps.append(F.binary_cross_entropy_with_logits(lp.obj[:, 0], obj_t, reduction="none").flatten())
        pos_maps.append(pos.flatten())
    bce = torch.cat(obj_maps)
    pos = torch.cat(pos_maps)
    npos = int(pos.sum())
    if obj_balance and 0 < npos < bce.numel():
        det_obj = 0.5 * bce[pos].mean() + 0.5 * bce[~pos].mean()
    else:
        det_obj = bce.mean()
    if ious:
        iou = torch.cat(ious)
        det_bbox = (1 - iou).mean()
        det_cls = F.binary_cross_entropy_with_logits(torch.cat(pred_boxes_cls), torch.cat(cls_targets))
    else:
        det_bbox = any_tensor.sum() * 0
        det_cls = any_tensor.sum() * 0
    return LossBreakdown(det_bbox=det_bbox, det_cls=det_cls, det_obj=det_obj)


def total_loss(seg, det: LossBreakdown):
    """Unweighted sum of the segmentation loss and the three detection terms."""
    parts = [seg, det.det_bbox, det.det_cls, det.det_obj]
    for name, v in zip(("seg", "det_bbox", "det_cls", "det_obj"), parts):
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise NumericError(f"non-finite {name} loss: {float(v.detach() if torch.is_tensor(v) else v)}")
    return seg + det.det_bbox + det.det_cls + det.det_obj
