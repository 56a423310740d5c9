"""Mask IoU, box IoU and average precision, plus dataset-level evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import ConfigError, DataError, ShapeError

AP_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = (float(v) for v in a)
    bx0, by0, bx1, by1 = (float(v) for v in b)
    if not (ax1 > ax0 and ay1 > ay0 and bx1 > bx0 and by1 > by0):
        raise DataError(f"degenerate box in IoU: {a} / {b}")
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def mask_counts(pred, gt, class_id):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred == class_id
    g = gt == class_id
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p | g))


def mask_iou(pred, gt, class_id) -> float:
    """IoU of one class between two label maps; 1.0 when the class is absent from both."""
    inter, union = mask_counts(pred, gt, class_id)
    return 1.0 if union == 0 else inter / union


def match_detections(detections, gts, iou_threshold):
    """Greedy matching in descending score order.

    ``detections`` is a list of ``(image_id, score, box)``; ``gts`` maps image id to a
    list of boxes. Returns the per-detection TP flags (in sorted order) and the
    number of ground-truth boxes.
    """
    order = sorted(range(len(detections)), key=lambda i: -float(detections[i][1]))
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        image_id, _, box = detections[i]
        cands = gts.get(image_id, [])
        best, best_iou = -1, -1.0
        for j, g in enumerate(cands):
            if used[image_id][j]:
                continue
            iou = box_iou(box, g)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            used[image_id][best] = True
            tp[rank] = True
    return tp, sum(len(v) for v in gts.values())


def average_precision(detections, gts, iou_threshold=0.5, interpolation="all"):
    """AP for one class; ``None`` when there is no ground truth (excluded from means).

    ``interpolation`` is ``"all"`` (area under the precision envelope at every
    recall step) or ``"11"`` (VOC 11-point sampling).
    """
    if not 0 < iou_threshold < 1:
        raise ConfigError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    tp, npos = match_detections(detections, gts, iou_threshold)
    if npos == 0:
        return None
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / npos
    precision = ctp / (ctp + cfp)
    if interpolation == "11":
        return float(np.mean([precision[recall >= r].max() if (recall >= r).any() else 0.0 for r in np.linspace(0, 1, 11)]))
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class MetricsReport:
    iou: dict
    mean_iou: float
    ap50: dict
    ap: dict
    map50: float
    map: float
    counts: dict
    conf_threshold: float = 0.25
    nms_iou: float = 0.45
    extra: dict = field(default_factory=dict)

    @property
    def wall_iou(self):
        return self.iou.get(1, 0.0)

    def to_dict(self):
        out = asdict(self)
        for key in ("iou", "ap50", "ap"):
            out[key] = {str(k): v for k, v in out[key].items()}
        return out

    def to_json(self, path=None, indent=2):
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def format_table(self, seg_names=("background", "wall"), det_names=("door", "window")):
        fmt = lambda v: "   -  " if v is None else f"{100 * v:6.1f}"
        lines = [f"{'Segmentation':<14}{'IoU (%)':>9}"]
        for c, v in sorted(self.iou.items()):
            name = seg_names[c] if c < len(seg_names) else f"class {c}"
            lines.append(f"{name:<14}{fmt(v):>9}")
        lines.append(f"{'mean':<14}{fmt(self.mean_iou):>9}")
        lines.append("")
        lines.append(f"{'Detection':<14}{'AP50 (%)':>9}{'AP@[.5:.95] (%)':>17}")
        for c in sorted(self.ap50):
            name = det_names[c] if c < len(det_names) else f"class {c}"
            lines.append(f"{name:<14}{fmt(self.ap50[c]):>9}{fmt(self.ap[c]):>17}")
        lines.append(f"{'mean':<14}{fmt(self.map50):>9}{fmt(self.map):>17}")
        return "\n".join(lines)


def evaluate_predictions(predictions, samples, num_seg_classes=2, num_det_classes=2, conf_threshold=0.25, nms_iou=0.45):
    """Score ``(mask, detections)`` pairs against their samples.

    Mask IoU is micro-averaged: intersections and unions are summed over all
    images before dividing. AP@[.5:.95] is the mean over ``AP_THRESHOLDS``.
    """
    if not samples:
        raise DataError("cannot evaluate an empty split")
    if len(predictions) != len(samples):
        raise ShapeError(f"{len(predictions)} predictions for {len(samples)} samples")
    inter = np.zeros(num_seg_classes, dtype=np.int64)
    union = np.zeros(num_seg_classes, dtype=np.int64)
    dets = {c: [] for c in range(num_det_classes)}
    gts = {c: {} for c in range(num_det_classes)}
    n_gt = n_det = 0
    for (pred_mask, pred_dets), s in zip(predictions, samples):
        for c in range(num_seg_classes):
            i, u = mask_counts(pred_mask, s.mask, c)
            inter[c] += i
            union[c] += u
        for c in range(num_det_classes):
            gts[c][s.id] = [tuple(b[1:]) for b in s.boxes if int(b[0]) == c]
        for d in pred_dets:
            if d.class_id in dets:
                dets[d.class_id].append((s.id, d.score, d.box))
                n_det += 1
        n_gt += len(s.boxes)
    iou = {c: (1.0 if union[c] == 0 else inter[c] / union[c]) for c in range(num_seg_classes)}
    present = [iou[c] for c in range(num_seg_classes) if union[c] > 0]
    ap50 = {c: average_precision(dets[c], gts[c], 0.5) for c in range(num_det_classes)}
    ap = {}
    for c in range(num_det_classes):
        per_t = [average_precision(dets[c], gts[c], t) for t in AP_THRESHOLDS]
        ap[c] = None if per_t[0] is None else float(np.mean(per_t))
    return MetricsReport(
        iou={c: float(v) for c, v in iou.items()},
        mean_iou=_mean(present),
        ap50=ap50,
        ap=ap,
        map50=_mean(ap50.values()),
        map=_mean(ap.values()),
        counts={"images": len(samples), "gt_boxes": n_gt, "detections": n_det},
        conf_threshold=conf_threshold,
        nms_iou=nms_iou,
    )


def evaluate(model, samples, conf_threshold=0.25, nms_iou=0.45, batch_size=8):
    """Run ``model`` over ``samples`` and score it.

    ``model`` is either a :class:`~muranet.network.MuraNetModel` or any callable
    mapping a list of samples to a list of ``(mask, detections)`` pairs.
    """
    from .inference import predict_samples

    if not samples:
        raise DataError("cannot evaluate an empty split")
    if callable(model) and not hasattr(model, "config"):
        predictions = model(samples)
        nseg = max(2, max(int(s.mask.max()) for s in samples) + 1)
        ndet = max([2] + [int(b[0]) + 1 for s in samples for b in s.boxes])
    else:
        predictions = predict_samples(model, samples, conf_threshold, nms_iou, batch_size)
        nseg, ndet = model.config.num_seg_classes, model.config.num_det_classes
    return evaluate_predictions(predictions, samples, nseg, ndet, conf_threshold, nms_iou)
