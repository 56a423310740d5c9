import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from muranet.config import ConfigError, ModelConfig, ShapeError
from muranet.heads import (
    DetHead,
    Detection,
    LevelPrediction,
    SegDecoder,
    box_iou_matrix,
    decode_box,
    decode_detections,
    encode_box,
    nms,
    read_detections,
    write_detections,
)
from muranet.network import init_model


def _level(h, w, k=2, obj=-50.0):
    return LevelPrediction(
        torch.full((1, k, h, w), 50.0), torch.zeros(1, 4, h, w), torch.full((1, 1, h, w), obj)
    )


def test_seg_logits_full_resolution():
    model = init_model(ModelConfig(input_size=(256, 256)))
    logits, det = model(torch.rand(1, 3, 256, 256))
    assert logits.shape == (1, 2, 256, 256)
    assert [det[s].cls.shape[-2:] for s in (8, 16, 32)] == [(32, 32), (16, 16), (8, 8)]
    assert all(det[s].cls.shape[1] == 2 and det[s].box.shape[1] == 4 and det[s].obj.shape[1] == 1 for s in det)


def test_stride4_features_excluded_from_segmentation():
    cfg = ModelConfig()
    dec = SegDecoder(cfg).eval()
    pyr = init_model(cfg).eval().backbone(torch.rand(1, 3, 128, 128))
    with torch.no_grad():
        ref = dec(pyr)
        for replacement in (torch.zeros_like(pyr[4]), torch.randn_like(pyr[4]) * 100):
            assert torch.equal(dec({**pyr, 4: replacement}), ref)
        assert torch.equal(dec({k: v for k, v in pyr.items() if k != 4}), ref)


def test_seg_decoder_missing_level():
    dec = SegDecoder(ModelConfig())
    with pytest.raises(ShapeError):
        dec({8: torch.zeros(1, 64, 16, 16), 32: torch.zeros(1, 256, 4, 4)})


def test_head_hidden_width():
    head = DetHead(ModelConfig(head_hidden=256))
    for s in ("8", "16", "32"):
        assert head.heads[s].stem[0].out_channels == 256
        assert head.heads[s].reg_convs[1][0].out_channels == 256


def test_coupled_and_decoupled_shapes_agree():
    pyr = init_model(ModelConfig()).backbone(torch.rand(1, 3, 128, 128))
    a = DetHead(ModelConfig(decoupled_head=True))(pyr)
    b = DetHead(ModelConfig(decoupled_head=False))(pyr)
    for s in a:
        for field in ("cls", "box", "obj"):
            assert getattr(a[s], field).shape == getattr(b[s], field).shape


def test_unknown_detection_level():
    cfg = ModelConfig()
    cfg.det_levels = (4, 8)
    with pytest.raises(ConfigError):
        DetHead(cfg)


def test_decode_single_cell():
    lvl = _level(8, 8)
    lvl.obj[0, 0, 2, 3] = 50.0
    dets = decode_detections({8: lvl}, 0.25, 0.45)
    assert len(dets) == 2  # one per class, same box
    for d in dets:
        assert d.box == pytest.approx((24, 16, 32, 24), abs=1e-9)
        assert d.score == pytest.approx(1.0)


def test_decode_all_negative_is_empty():
    lvl = _level(8, 8, obj=-math.inf)
    assert decode_detections({8: lvl, 16: _level(4, 4, obj=-math.inf)}) == []


def test_decode_thresholds_validated():
    with pytest.raises(ConfigError):
        decode_detections({8: _level(2, 2)}, conf_threshold=1.5)


def test_decode_sorted_and_scored():
    g = torch.Generator().manual_seed(0)
    lvl = LevelPrediction(torch.randn(1, 2, 8, 8, generator=g), torch.randn(1, 4, 8, 8, generator=g) * 0.3, torch.randn(1, 1, 8, 8, generator=g) + 2)
    dets = decode_detections({8: lvl}, 0.3, 0.45, image_size=(64, 64))
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    assert all(0.3 <= s <= 1 for s in scores)
    for d in dets:
        assert 0 <= d.box[0] < d.box[2] <= 64 and 0 <= d.box[1] < d.box[3] <= 64


def test_nms_keeps_higher_of_duplicates():
    keep = nms([(0, 0, 10, 10), (0, 0, 10, 10)], [0.8, 0.9], 0.5)
    assert keep == [1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 0.9))
def test_nms_subset_with_low_pairwise_iou(seed, thr):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 25))
    xy = rng.uniform(0, 50, size=(n, 2))
    wh = rng.uniform(2, 20, size=(n, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)
    scores = rng.random(n)
    keep = nms(boxes, scores, thr)
    assert len(set(keep)) == len(keep) and set(keep) <= set(range(n))
    ious = box_iou_matrix(boxes[keep], boxes[keep])
    np.fill_diagonal(ious, 0)
    assert (ious < thr).all()
    # every dropped box is suppressed by a kept, higher-scored box
    for i in set(range(n)) - set(keep):
        assert any(box_iou_matrix(boxes[i], boxes[j])[0, 0] >= thr and scores[j] >= scores[i] for j in keep)


@settings(max_examples=200, deadline=None)
@given(
    st.sampled_from([8, 16, 32]),
    st.floats(0, 255),
    st.floats(0, 255),
    st.floats(1, 200),
    st.floats(1, 200),
)
def test_encode_decode_round_trip(stride, cx, cy, w, h):
    box = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    cell, t = encode_box(box, stride)
    frac_x = cx / stride - cell[1]
    frac_y = cy / stride - cell[0]
    if min(frac_x, frac_y) < 1e-6 or max(frac_x, frac_y) > 1 - 1e-6:
        return  # centre on a cell edge: logit saturates by design
    back = decode_box(t, cell, stride)
    assert np.allclose(back, box, atol=1e-6)


def test_detection_validates_box():
    with pytest.raises(ValueError):
        Detection(0, 0.5, (5, 5, 5, 9))


def test_detection_file_round_trip(tmp_path):
    recs = [("a", Detection(0, 0.912345678, (1.5, 2.25, 10.0, 20.125))), ("b", Detection(1, 0.5, (0, 0, 3, 4)))]
    path = tmp_path / "d.txt"
    write_detections(path, recs)
    lines = path.read_text().splitlines()
    assert lines[0] == "a 0 0.912346 1.500000 2.250000 10.000000 20.125000"
    back = read_detections(path)
    assert back[1] == recs[1]
    assert back[0][1].box == recs[0][1].box
