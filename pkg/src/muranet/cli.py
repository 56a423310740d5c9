"""Command line entry point: ``muranet {synth,train,eval,predict,visualize}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, DataError, dump_config, load_config
from .data import Sample, load_split, resize_sample, synthesize_dataset
from .heads import Detection, read_detections, write_detections
from .model import load_checkpoint

log = logging.getLogger("muranet")


def _write_resolved(out, configs, **extra):
    payload = dump_config(configs)
    payload.update(extra)
    (out / "config.json").write_text(json.dumps(payload, indent=2))


def cmd_synth(args, configs):
    counts = synthesize_dataset(configs["synth"], args.out)
    _write_resolved(args.out, configs)
    print(json.dumps({"written": counts, "root": str(args.out)}))


def cmd_train(args, configs):
    from .train import train_run

    data = _require(args.data, "--data")
    report, _ = train_run(configs["model"], configs["train"], data, out_dir=args.out)
    _write_resolved(args.out, configs, data=str(data))
    last = report.records[-1]
    print(json.dumps({"epochs": len(report.records), "final_loss": last.losses["total"], "out": str(args.out)}))


def _oracle_predictions(samples):
    preds = []
    for s in samples:
        dets = [Detection(int(c), 1.0, (float(x0), float(y0), float(x1), float(y1))) for c, x0, y0, x1, y1 in s.boxes]
        preds.append((s.mask.copy(), dets))
    return preds


def cmd_eval(args, configs):
    from .metrics import evaluate, evaluate_predictions

    data = _require(args.data, "--data")
    samples = load_split(data, args.split)
    tc = configs["train"]
    if args.oracle:
        mc = configs["model"]
        samples = [s if s.mask.shape == mc.input_size else resize_sample(s, mc.input_size) for s in samples]
        report = evaluate_predictions(
            _oracle_predictions(samples), samples, mc.num_seg_classes, mc.num_det_classes, tc.conf_threshold, tc.nms_iou
        )
    else:
        model = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
        size = model.config.input_size
        samples = [s if s.mask.shape == size else resize_sample(s, size) for s in samples]
        report = evaluate(model, samples, tc.conf_threshold, tc.nms_iou)
    report.extra["split"] = args.split
    report.to_json(args.out / "metrics.json")
    _write_resolved(args.out, configs, data=str(data), checkpoint=str(args.checkpoint), oracle=args.oracle)
    print(report.format_table())


def _input_images(args, size):
    """(id, float image) pairs from --input files/directories or a dataset split."""
    items = []
    if args.input:
        paths = []
        for p in args.input:
            p = Path(p)
            paths.extend(sorted(p.glob("*.png")) if p.is_dir() else [p])
        for p in paths:
            if not p.exists():
                raise DataError(f"{p.stem}: missing file {p}")
            rgb = np.asarray(Image.open(p).convert("RGB"))
            img = (rgb.transpose(2, 0, 1) / 255).astype(np.float32)
            items.append((p.stem, img))
    elif args.data:
        for s in load_split(args.data, args.split):
            items.append((s.id, s.image))
    else:
        raise ConfigError("give --input files or --data with --split")
    out = []
    for sample_id, img in items:
        s = Sample(img, np.zeros(img.shape[1:], dtype=np.uint8), [], sample_id)
        if s.mask.shape != tuple(size):
            s = resize_sample(s, size)
        out.append((sample_id, s.image))
    return out


def _predict(model, items, tc):
    import torch

    from .inference import predict_images

    preds = []
    for sample_id, img in items:
        mask, dets = predict_images(model, torch.from_numpy(img[None]), tc.conf_threshold, tc.nms_iou)[0]
        preds.append((sample_id, img, mask, dets))
    return preds


def cmd_predict(args, configs):
    model = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    items = _input_images(args, model.config.input_size)
    records = []
    for sample_id, _, mask, dets in _predict(model, items, configs["train"]):
        Image.fromarray(mask.astype(np.uint8), "L").save(args.out / f"{sample_id}_mask.png")
        records.extend((sample_id, d) for d in dets)
    write_detections(args.out / "detections.txt", records)
    _write_resolved(args.out, configs, checkpoint=str(args.checkpoint))
    print(json.dumps({"images": len(items), "detections": len(records), "out": str(args.out)}))


def cmd_visualize(args, configs):
    from .visualize import overlay

    if args.predictions:
        pred_dir = Path(args.predictions)
        by_id = {}
        for image_id, det in read_detections(pred_dir / "detections.txt"):
            by_id.setdefault(image_id, []).append(det)
        masks = {p.name[: -len("_mask.png")]: p for p in pred_dir.glob("*_mask.png")}
        size = None
        if masks:
            size = np.asarray(Image.open(next(iter(masks.values())))).shape
        items = _input_images(args, size) if size else []
        rendered = []
        for sample_id, img in items:
            if sample_id not in masks:
                raise DataError(f"{sample_id}: no stored prediction in {pred_dir}")
            mask = np.asarray(Image.open(masks[sample_id]))
            rendered.append((sample_id, img, mask, by_id.get(sample_id, [])))
    else:
        model = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
        rendered = _predict(model, _input_images(args, model.config.input_size), configs["train"])
    for sample_id, img, mask, dets in rendered:
        overlay(img, mask, dets).save(args.out / f"{sample_id}_overlay.png")
    print(json.dumps({"images": len(rendered), "out": str(args.out)}))


def _require(value, flag):
    if value is None:
        raise ConfigError(f"{flag} is required for this command")
    return value


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "visualize": cmd_visualize,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="muranet", description="Floor-plan wall segmentation and door/window detection.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with model/train/synth sections")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
        if name != "synth":
            p.add_argument("--data", type=Path, help="dataset root written by 'synth'")
        if name in ("eval", "predict", "visualize"):
            p.add_argument("--checkpoint", type=Path)
            p.add_argument("--split", default="test", choices=("train", "val", "test"))
        if name in ("predict", "visualize"):
            p.add_argument("--input", nargs="+", help="PNG files or directories")
        if name == "eval":
            p.add_argument("--oracle", action="store_true", help="score ground truth against itself")
        if name == "visualize":
            p.add_argument("--predictions", type=Path, help="directory written by 'predict'")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        configs = load_config(args.config, args.override)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, configs)
    except Exception as exc:  # noqa: BLE001 - reported as one machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
