from __future__ import annotations

import numpy as np
import torch

from .heads import decode_detections


def to_batch(samples, dtype=torch.float32):
    return torch.from_numpy(np.stack([s.image for s in samples])).to(dtype)


@torch.no_grad()
def predict_images(model, images, conf_threshold=0.25, nms_iou=0.45):
    """Masks and detections for an (N, 3, H, W) batch, model in inference mode."""
    was_training = model.training
    model.eval()
    try:
        logits, det = model(images)
    finally:
        model.train(was_training)
    masks = logits.argmax(1).to(torch.uint8).numpy()
    size = tuple(images.shape[-2:])
    out = []
    for i in range(images.shape[0]):
        out.append((masks[i], decode_detections(det, conf_threshold, nms_iou, image_size=size, batch_index=i)))
    return out


def predict_samples(model, samples, conf_threshold=0.25, nms_iou=0.45, batch_size=8):
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(samples), batch_size):
        out.extend(predict_images(model, to_batch(samples[i : i + batch_size], dtype), conf_threshold, nms_iou))
    return out
