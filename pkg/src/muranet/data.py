"""Synthetic floor plans, resizing rules and on-disk dataset layout.

Plans are rectilinear: an outer wall rectangle recursively split into rooms.
Doors are wall gaps with a leaf line and a quarter-circle swing, windows are
wall openings drawn as two parallel thin lines. Only walls are labelled in the
mask; doors (class 0) and windows (class 1) are boxes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .config import ConfigError, DataError, SynthSpec

DOOR, WINDOW = 0, 1
CLASS_NAMES = ("door", "window")
SPLITS = ("train", "val", "test")


class GenerationError(ValueError):
    pass


@dataclass(eq=False)
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 class indices
    boxes: list = field(default_factory=list)  # [(class_id, x0, y0, x1, y1)]
    id: str = ""

    @property
    def size(self):
        return self.mask.shape

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
            and [tuple(b) for b in self.boxes] == [tuple(b) for b in other.boxes]
        )


@dataclass
class _Wall:
    vertical: bool
    pos: int  # centre line (x for vertical walls, y for horizontal)
    start: int
    end: int
    exterior: bool

    def band(self, t):
        lo = self.pos - t // 2
        if self.vertical:
            return (lo, self.start - t // 2, lo + t, self.end - t // 2 + t)
        return (self.start - t // 2, lo, self.end - t // 2 + t, lo + t)


def _partition(rng, outer, n_rooms, min_size):
    rooms = [outer]
    walls = []
    for _ in range(n_rooms - 1):
        order = sorted(range(len(rooms)), key=lambda i: -(rooms[i][2] - rooms[i][0]) * (rooms[i][3] - rooms[i][1]))
        for i in order:
            x0, y0, x1, y1 = rooms[i]
            can_v = x1 - x0 >= 2 * min_size
            can_h = y1 - y0 >= 2 * min_size
            if not (can_v or can_h):
                continue
            vertical = bool(rng.integers(2)) if can_v and can_h else can_v
            if vertical:
                s = int(rng.integers(x0 + min_size, x1 - min_size + 1))
                rooms[i : i + 1] = [(x0, y0, s, y1), (s, y0, x1, y1)]
                walls.append(_Wall(True, s, y0, y1, False))
            else:
                s = int(rng.integers(y0 + min_size, y1 - min_size + 1))
                rooms[i : i + 1] = [(x0, y0, x1, s), (x0, s, x1, y1)]
                walls.append(_Wall(False, s, x0, x1, False))
            break
        else:
            raise GenerationError(f"cannot fit {n_rooms} rooms of at least {min_size}px in the canvas")
    return rooms, walls


def _fill(arr, rect, value):
    x0, y0, x1, y1 = rect
    arr[y0:y1, x0:x1] = value


def _overlaps(a, b, gap=0):
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def _tight_box(layer):
    ys, xs = np.nonzero(layer)
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def generate_floorplan(spec: SynthSpec, index: int) -> Sample:
    """Render plan number ``index`` of ``spec``; a pure function of ``(spec.seed, index)``."""
    spec.validate()
    h, w = spec.canvas
    scale = min(h, w) / 128.0
    t_hi = spec.wall_thickness[1]
    margin = max(t_hi + 2, int(round(6 * scale)))
    min_room = int(round(28 * scale))
    door_len = (int(round(10 * scale)), int(round(14 * scale)))
    win_len = (int(round(12 * scale)), int(round(18 * scale)))
    if 2 * margin + min_room > min(h, w) or 4 * t_hi >= min_room:
        raise GenerationError(f"wall thickness {spec.wall_thickness} infeasible for canvas {spec.canvas}")

    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), int(index)]))
    t = int(rng.integers(spec.wall_thickness[0], spec.wall_thickness[1] + 1))
    jitter = int(round(4 * scale))
    outer = (
        margin + int(rng.integers(0, jitter + 1)),
        margin + int(rng.integers(0, jitter + 1)),
        w - margin - int(rng.integers(0, jitter + 1)),
        h - margin - int(rng.integers(0, jitter + 1)),
    )
    n_rooms = int(rng.integers(spec.rooms[0], spec.rooms[1] + 1))
    _, inner = _partition(rng, outer, n_rooms, min_room)
    x0, y0, x1, y1 = outer
    walls = [
        _Wall(False, y0, x0, x1, True),
        _Wall(False, y1, x0, x1, True),
        _Wall(True, x0, y0, y1, True),
        _Wall(True, x1, y0, y1, True),
    ] + inner

    wall = np.zeros((h, w), dtype=bool)
    for seg in walls:
        _fill(wall, seg.band(t), True)

    ink = np.zeros((h, w), dtype=np.uint8)  # thin strokes (door leaves, arcs, window lines)
    openings = np.zeros((h, w), dtype=bool)
    boxes = []

    def try_place(kind):
        lo, hi = door_len if kind == DOOR else win_len
        length = int(rng.integers(lo, hi + 1))
        candidates = walls if kind == DOOR else [s for s in walls if s.exterior] or walls
        seg = candidates[int(rng.integers(len(candidates)))]
        a = seg.start + t + 2
        b = seg.end - t - 2 - length
        if b < a:
            return False
        p = int(rng.integers(a, b + 1))
        bx0, by0, bx1, by1 = seg.band(t)
        gap = (bx0, p, bx1, p + length) if seg.vertical else (p, by0, p + length, by1)
        glyph = np.zeros((h, w), dtype=np.uint8)
        strokes = np.zeros((h, w), dtype=np.uint8)
        _fill(glyph, gap, 1)
        if kind == DOOR:
            if seg.exterior:
                side = 1 if seg.pos == (outer[0] if seg.vertical else outer[1]) else -1
            else:
                side = 1 if rng.integers(2) else -1
            if seg.vertical:
                hx = bx1 - 1 if side > 0 else bx0
                hinge = (hx, p)
                tip = (hx + side * (length - 1), p)
                angles = (0, 90) if side > 0 else (90, 180)
            else:
                hy = by1 - 1 if side > 0 else by0
                hinge = (p, hy)
                tip = (p, hy + side * (length - 1))
                angles = (0, 90) if side > 0 else (270, 360)
            cv2.line(strokes, hinge, tip, 1, 1)
            cv2.ellipse(strokes, hinge, (length - 1, length - 1), 0, angles[0], angles[1], 1, 1)
        else:
            if seg.vertical:
                strokes[p : p + length, bx0] = 1
                strokes[p : p + length, bx1 - 1] = 1
            else:
                strokes[by0, p : p + length] = 1
                strokes[by1 - 1, p : p + length] = 1
        glyph |= strokes
        box = _tight_box(glyph)
        if box[0] < 1 or box[1] < 1 or box[2] > w - 1 or box[3] > h - 1:
            return False
        if any(_overlaps(box, other[1:], gap=4) for other in boxes):
            return False
        gap_mask = np.zeros((h, w), dtype=bool)
        _fill(gap_mask, gap, True)
        if (strokes.astype(bool) & wall & ~gap_mask).any():
            return False
        wall[gap_mask] = False
        openings[gap_mask] = True
        ink[strokes.astype(bool)] = 1
        boxes.append((kind, *box))
        return True

    for kind, (lo, hi) in ((DOOR, spec.doors_per_plan), (WINDOW, spec.windows_per_plan)):
        want = int(rng.integers(lo, hi + 1))
        placed = attempts = 0
        while placed < want and attempts < 300:
            attempts += 1
            placed += bool(try_place(kind))
        if placed < lo:
            raise GenerationError(f"could only place {placed} of at least {lo} {CLASS_NAMES[kind]}s")

    # Rendering: light background, dark walls, thin dark strokes, faint noise lines.
    ground = 0.94 + 0.04 * rng.random()
    img = np.full((h, w), ground, dtype=np.float64)
    img[openings] = 1.0
    if spec.line_noise > 0:
        for _ in range(int(rng.integers(1, 4))):
            y = int(rng.integers(h))
            x = int(rng.integers(w))
            tone = ground - 0.15 - 0.1 * rng.random()
            if rng.integers(2):
                img[y, : max(1, x)] = np.minimum(img[y, : max(1, x)], tone)
            else:
                img[: max(1, y), x] = np.minimum(img[: max(1, y), x], tone)
    img[ink.astype(bool)] = 0.2
    img[wall] = 0.08 + 0.06 * rng.random()
    tint = 1.0 + 0.03 * (rng.random(3) - 0.5)
    rgb = img[None] * tint[:, None, None]
    if spec.line_noise > 0:
        rgb = rgb + rng.normal(0.0, spec.line_noise, size=rgb.shape)
    image = (np.clip(np.round(rgb * 255), 0, 255) / 255).astype(np.float32)
    boxes = sorted(boxes, key=lambda b: (b[2], b[1], b[0]))
    return Sample(image, wall.astype(np.uint8), [tuple(int(v) for v in b) for b in boxes], f"{index:05d}")


def _resize_axis(arr, size, axis, label):
    """Resize one spatial axis of an (H, W) or (H, W, C) array."""
    if arr.shape[axis] == size:
        return arr
    h, w = arr.shape[:2]
    dsize = (w, size) if axis == 0 else (size, h)
    if label:
        method = cv2.INTER_NEAREST
    else:
        method = cv2.INTER_AREA if size < arr.shape[axis] else cv2.INTER_CUBIC
    return cv2.resize(arr, dsize, interpolation=method)


def resize_sample(s: Sample, target) -> Sample:
    """Resize to ``target = (H', W')`` without preserving the aspect ratio.

    Each axis is shrunk with area interpolation or enlarged with bicubic
    interpolation; the mask uses nearest neighbour and boxes scale linearly.
    """
    th, tw = (int(v) for v in target)
    if th <= 0 or tw <= 0 or th % 32 or tw % 32:
        raise ConfigError(f"target: size not divisible by 32: {(th, tw)}")
    h, w = s.mask.shape
    img = np.ascontiguousarray(s.image.transpose(1, 2, 0))
    img = _resize_axis(_resize_axis(img, tw, 1, False), th, 0, False)
    if img.ndim == 2:
        img = img[..., None]
    img = np.clip(img, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)
    mask = _resize_axis(_resize_axis(s.mask, tw, 1, True), th, 0, True)
    sx, sy = tw / w, th / h
    boxes = [(c, x0 * sx, y0 * sy, x1 * sx, y1 * sy) for c, x0, y0, x1, y1 in s.boxes]
    return Sample(np.ascontiguousarray(img), np.ascontiguousarray(mask), boxes, s.id)


def _paths(root, split, sample_id):
    base = Path(root) / split
    return (
        base / "images" / f"{sample_id}.png",
        base / "masks" / f"{sample_id}.png",
        base / "boxes" / f"{sample_id}.jsonl",
    )


def save_sample(root, split, s: Sample):
    img_p, mask_p, box_p = _paths(root, split, s.id)
    for p in (img_p, mask_p, box_p):
        p.parent.mkdir(parents=True, exist_ok=True)
    rgb = np.round(s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(img_p)
    Image.fromarray(s.mask.astype(np.uint8), "L").save(mask_p)
    with open(box_p, "w") as fh:
        for c, *bbox in s.boxes:
            fh.write(json.dumps({"class": int(c), "bbox": [float(v) if not float(v).is_integer() else int(v) for v in bbox]}) + "\n")


def load_sample(root, split, sample_id) -> Sample:
    img_p, mask_p, box_p = _paths(root, split, sample_id)
    for p in (img_p, mask_p, box_p):
        if not p.exists():
            raise DataError(f"{sample_id}: missing file {p}")
    try:
        rgb = np.asarray(Image.open(img_p).convert("RGB"))
        mask = np.asarray(Image.open(mask_p))
    except OSError as exc:
        raise DataError(f"{sample_id}: unreadable image: {exc}") from None
    if mask.shape != rgb.shape[:2]:
        raise DataError(f"{sample_id}: mask shape {mask.shape} != image shape {rgb.shape[:2]}")
    h, w = mask.shape
    boxes = []
    for lineno, line in enumerate(box_p.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            c = int(rec["class"])
            x0, y0, x1, y1 = rec["bbox"]
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{sample_id}: corrupt box record on line {lineno}: {exc}") from None
        if not (x1 > x0 and y1 > y0):
            raise DataError(f"{sample_id}: box on line {lineno} has non-positive size {rec['bbox']}")
        if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
            raise DataError(f"{sample_id}: box on line {lineno} outside image {(h, w)}")
        boxes.append((c, x0, y0, x1, y1))
    image = (rgb.transpose(2, 0, 1) / 255).astype(np.float32)
    return Sample(image, mask.astype(np.uint8), boxes, sample_id)


def write_manifest(root, split, ids):
    p = Path(root) / split / "ids.txt"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text("".join(f"{i}\n" for i in ids))


def enumerate_split(root, split=None):
    """Sample ids per split, read from ``<root>/<split>/ids.txt``."""
    splits = SPLITS if split is None else (split,)
    out = {}
    for name in splits:
        p = Path(root) / name / "ids.txt"
        out[name] = [line.strip() for line in p.read_text().splitlines() if line.strip()] if p.exists() else []
    return out if split is None else out[split]


def load_split(root, split):
    ids = enumerate_split(root, split)
    return [load_sample(root, split, i) for i in ids]


def synthesize_dataset(spec: SynthSpec, root):
    """Generate every split of ``spec`` under ``root``; indices run on across splits."""
    index = 0
    counts = {}
    for split in SPLITS:
        ids = []
        for _ in range(spec.splits.get(split, 0)):
            s = generate_floorplan(spec, index)
            s.id = f"{split}_{index:05d}"
            save_sample(root, split, s)
            ids.append(s.id)
            index += 1
        write_manifest(root, split, ids)
        counts[split] = len(ids)
    return counts
