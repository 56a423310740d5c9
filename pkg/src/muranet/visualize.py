from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .data import CLASS_NAMES

WALL_COLOUR = np.array([220, 40, 40], dtype=np.float64)
BOX_COLOURS = ((30, 110, 230), (20, 170, 60))


def overlay(image, mask, detections, alpha=0.45, class_names=CLASS_NAMES):
    """8-bit RGB rendering: walls alpha-blended in red, boxes outlined with class and score."""
    rgb = np.asarray(image, dtype=np.float64)
    if rgb.ndim == 3 and rgb.shape[0] == 3:
        rgb = rgb.transpose(1, 2, 0)
    if rgb.max() <= 1.0:
        rgb = rgb * 255
    walls = np.asarray(mask) == 1
    rgb = rgb.copy()
    rgb[walls] = (1 - alpha) * rgb[walls] + alpha * WALL_COLOUR
    img = Image.fromarray(np.clip(np.round(rgb), 0, 255).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(img)
    for det in detections:
        colour = BOX_COLOURS[det.class_id % len(BOX_COLOURS)]
        x0, y0, x1, y1 = det.box
        draw.rectangle([x0, y0, x1 - 1, y1 - 1], outline=colour, width=1)
        name = class_names[det.class_id] if det.class_id < len(class_names) else str(det.class_id)
        draw.text((x0, max(0, y0 - 10)), f"{name} {det.score:.2f}", fill=colour)
    return img
