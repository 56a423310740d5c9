"""Segmentation decoder, detection head and box decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, DET_STRIDES, ModelConfig, ShapeError


def conv_bn_act(cin, cout, kernel=3):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.GELU(),
    )


class UpLayer(nn.Module):
    """Upsample, optionally concatenate a skip map and fuse it with a 1x1 conv, then two conv+BN+GELU."""

    def __init__(self, cin, cout, skip=0, scale=2, convs=2):
        super().__init__()
        self.scale = scale
        self.fuse = conv_bn_act(cin + skip, cin, kernel=1) if skip else None
        self.conv = nn.Sequential(conv_bn_act(cin, cout), *(conv_bn_act(cout, cout) for _ in range(convs - 1)))

    def forward(self, x, skip=None):
        x = F.interpolate(x, scale_factor=self.scale, mode="bilinear", align_corners=False)
        if self.fuse is not None:
            x = self.fuse(torch.cat([x, skip], dim=1))
        return self.conv(x)


class SegDecoder(nn.Module):
    """Four upsample-conv layers over the stride 8/16/32 maps.

    /32 -> /16 (+ stride-16 skip), /16 -> /8 (+ stride-8 skip), /8 -> /4,
    /4 -> /1 by a x4 bilinear step, then a 1x1 classifier. The stride-4 map is
    never read.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.stage_channels
        d = config.decoder_channels
        self.up16 = UpLayer(c[3], d[0], skip=c[2])
        self.up8 = UpLayer(d[0], d[1], skip=c[1])
        self.up4 = UpLayer(d[1], d[2])
        self.up1 = UpLayer(d[2], d[3], scale=4)
        self.classifier = nn.Conv2d(d[3], config.num_seg_classes, 1)

    def forward(self, pyramid):
        missing = [s for s in (8, 16, 32) if s not in pyramid]
        if missing:
            raise ShapeError(f"pyramid is missing level(s) {missing}")
        x = self.up16(pyramid[32], pyramid[16])
        x = self.up8(x, pyramid[8])
        x = self.up4(x)
        x = self.up1(x)
        return self.classifier(x)


@dataclass
class LevelPrediction:
    cls: torch.Tensor  # (N, num_classes, h, w)
    box: torch.Tensor  # (N, 4, h, w) raw t_x, t_y, t_w, t_h
    obj: torch.Tensor  # (N, 1, h, w)


class LevelHead(nn.Module):
    def __init__(self, cin, hidden, num_classes, decoupled=True):
        super().__init__()
        self.num_classes = num_classes
        self.decoupled = decoupled
        self.stem = conv_bn_act(cin, hidden, kernel=1)
        if decoupled:
            self.cls_convs = nn.Sequential(conv_bn_act(hidden, hidden), conv_bn_act(hidden, hidden))
            self.reg_convs = nn.Sequential(conv_bn_act(hidden, hidden), conv_bn_act(hidden, hidden))
            self.cls_pred = nn.Conv2d(hidden, num_classes, 1)
            self.reg_pred = nn.Conv2d(hidden, 4, 1)
            self.obj_pred = nn.Conv2d(hidden, 1, 1)
        else:
            self.trunk = nn.Sequential(conv_bn_act(hidden, hidden), conv_bn_act(hidden, hidden))
            self.pred = nn.Conv2d(hidden, num_classes + 5, 1)

    def forward(self, x):
        x = self.stem(x)
        if self.decoupled:
            c = self.cls_convs(x)
            r = self.reg_convs(x)
            return LevelPrediction(self.cls_pred(c), self.reg_pred(r), self.obj_pred(r))
        out = self.pred(self.trunk(x))
        k = self.num_classes
        return LevelPrediction(out[:, :k], out[:, k : k + 4], out[:, k + 4 :])


class DetHead(nn.Module):
    """One head per detection level (strides among 8, 16, 32)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        unknown = set(config.det_levels) - set(DET_STRIDES)
        if unknown:
            raise ConfigError(f"det_levels: unknown level(s) {sorted(unknown)}")
        self.levels = tuple(config.det_levels)
        index = {4: 0, 8: 1, 16: 2, 32: 3}
        self.heads = nn.ModuleDict(
            {
                str(s): LevelHead(
                    config.stage_channels[index[s]],
                    config.head_hidden,
                    config.num_det_classes,
                    config.decoupled_head,
                )
                for s in self.levels
            }
        )

    def forward(self, pyramid):
        out = {}
        for s in self.levels:
            if s not in pyramid:
                raise ShapeError(f"pyramid is missing detection level {s}")
            out[s] = self.heads[str(s)](pyramid[s])
        return out

    def init_priors(self, prior=0.01):
        bias = -math.log((1 - prior) / prior)
        with torch.no_grad():
            for head in self.heads.values():
                if head.decoupled:
                    head.cls_pred.bias.fill_(bias)
                    head.obj_pred.bias.fill_(bias)
                else:
                    k = head.num_classes
                    head.pred.bias[:k].fill_(bias)
                    head.pred.bias[k + 4 :].fill_(bias)


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple  # (x_min, y_min, x_max, y_max) in image pixels

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate detection box {self.box}")


def grid_boxes(box_raw, stride):
    """Decode raw regressands (..., 4, h, w) to (x0, y0, x1, y1) maps in pixels."""
    h, w = box_raw.shape[-2:]
    ys = torch.arange(h, dtype=box_raw.dtype, device=box_raw.device).view(h, 1)
    xs = torch.arange(w, dtype=box_raw.dtype, device=box_raw.device).view(1, w)
    tx, ty, tw, th = box_raw.unbind(-3)
    cx = (xs + torch.sigmoid(tx)) * stride
    cy = (ys + torch.sigmoid(ty)) * stride
    bw = torch.exp(tw) * stride
    bh = torch.exp(th) * stride
    return torch.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], dim=-3)


def _logit(p):
    return math.log(p) - math.log1p(-p)


def encode_box(box, stride, eps=1e-9):
    """Return the cell (row, col) holding the box centre and the regressands reproducing the box."""
    x0, y0, x1, y1 = (float(v) for v in box)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    col, row = int(math.floor(cx / stride)), int(math.floor(cy / stride))
    fx = min(max(cx / stride - col, eps), 1 - eps)
    fy = min(max(cy / stride - row, eps), 1 - eps)
    t = (_logit(fx), _logit(fy), math.log((x1 - x0) / stride), math.log((y1 - y0) / stride))
    return (row, col), t


def decode_box(t, cell, stride):
    """Inverse of :func:`encode_box` for a single cell."""
    tx, ty, tw, th = t
    row, col = cell
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    cx = (col + sig(tx)) * stride
    cy = (row + sig(ty)) * stride
    w = math.exp(tw) * stride
    h = math.exp(th) * stride
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def box_iou_matrix(a, b):
    """Pairwise IoU of (n, 4) and (m, 4) numpy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(boxes, scores, iou_threshold):
    """Greedy NMS; returns kept indices in descending score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    ious = box_iou_matrix(boxes, boxes)
    for pos, i in enumerate(order):
        if suppressed[pos]:
            continue
        keep.append(int(i))
        later = order[pos + 1 :]
        suppressed[pos + 1 :] |= ious[i, later] >= iou_threshold
    return keep


def decode_detections(pred, conf_threshold=0.25, nms_iou=0.45, image_size=None, batch_index=0):
    """Turn per-level raw predictions for one image into scored, NMS-filtered boxes.

    ``pred`` maps stride -> LevelPrediction. Boxes are clipped to ``image_size``
    (H, W) when given. Output is sorted by descending score.
    """
    if not (0 < conf_threshold < 1 and 0 < nms_iou < 1):
        raise ConfigError("conf_threshold and nms_iou must lie in (0, 1)")
    all_boxes, all_scores, all_cls = [], [], []
    with torch.no_grad():
        for stride, lp in pred.items():
            boxes = grid_boxes(lp.box[batch_index].double(), stride)  # (4, h, w)
            obj = torch.sigmoid(lp.obj[batch_index].double())  # (1, h, w)
            cls = torch.sigmoid(lp.cls[batch_index].double())  # (k, h, w)
            scores = (obj * cls).reshape(cls.shape[0], -1)
            flat_boxes = boxes.reshape(4, -1).T
            k_idx, cell_idx = torch.nonzero(scores >= conf_threshold, as_tuple=True)
            all_boxes.append(flat_boxes[cell_idx].numpy())
            all_scores.append(scores[k_idx, cell_idx].numpy())
            all_cls.append(k_idx.numpy())
    if not all_boxes:
        return []
    boxes = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    classes = np.concatenate(all_cls)
    if image_size is not None:
        h, w = image_size
        boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, w)
        boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, h)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1]) & np.isfinite(boxes).all(1)
    boxes, scores, classes = boxes[valid], scores[valid], classes[valid]
    dets = []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        for i in nms(boxes[idx], scores[idx], nms_iou):
            j = idx[i]
            dets.append(Detection(int(c), float(scores[j]), tuple(float(v) for v in boxes[j])))
    dets.sort(key=lambda d: -d.score)
    return dets


def write_detections(path, records):
    """Write ``(image_id, Detection)`` pairs as line-delimited fixed-point records."""
    with open(path, "w") as fh:
        for image_id, det in records:
            x0, y0, x1, y1 = det.box
            fh.write(
                f"{image_id} {det.class_id} {det.score:.6f} {x0:.6f} {y0:.6f} {x1:.6f} {y1:.6f}\n"
            )


def read_detections(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            image_id, cls, score, *box = line.split()
            out.append((image_id, Detection(int(cls), float(score), tuple(float(v) for v in box))))
    return out
