import pytest
import torch

from muranet.config import ConfigError, ModelConfig, ShapeError
from muranet.model import MURA, SPP, Backbone, load_checkpoint, save_checkpoint, spp_forward, stage_forward
from muranet.network import MuraNetModel, count_parameters, init_model

from conftest import check_gradient


def analytic_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count summed layer by layer."""
    conv = lambda cin, cout, k, bias=True, groups=1: cin // groups * cout * k * k + (cout if bias else 0)
    bn = lambda c: 2 * c
    total = 0
    chans = (3, *cfg.stage_channels)
    for i in range(4):
        cin, c = chans[i], chans[i + 1]
        if i == 0:
            mid = c // 2
            total += conv(cin, mid, 3, False) + bn(mid) + conv(mid, c, 3, False) + bn(c)
        else:
            total += conv(cin, c, 3, False) + bn(c)
        hidden = round(c * cfg.mlp_ratio)
        block = 2 * bn(c)
        block += cfg.mura_convs * conv(c, c, 3, groups=c) + conv(c, c, 1)
        block += conv(c, hidden, 1) + conv(hidden, hidden, 3, groups=hidden) + conv(hidden, c, 1)
        total += cfg.stage_depths[i] * block
    if cfg.spp_enabled:
        total += conv(4 * chans[4], chans[4], 1)
    c, d = cfg.stage_channels, cfg.decoder_channels
    up = lambda cin, cout, skip=0: (conv(cin + skip, cin, 1, False) + bn(cin) if skip else 0) + conv(cin, cout, 3, False) + bn(cout) + conv(cout, cout, 3, False) + bn(cout)
    total += up(c[3], d[0], c[2]) + up(d[0], d[1], c[1]) + up(d[1], d[2]) + up(d[2], d[3])
    total += conv(d[3], cfg.num_seg_classes, 1)
    hid, k = cfg.head_hidden, cfg.num_det_classes
    level_in = {8: c[1], 16: c[2], 32: c[3]}
    trunk = 2 * (conv(hid, hid, 3, False) + bn(hid))
    for s in cfg.det_levels:
        total += conv(level_in[s], hid, 1, False) + bn(hid)
        if cfg.decoupled_head:
            total += 2 * trunk + conv(hid, k, 1) + conv(hid, 4, 1) + conv(hid, 1, 1)
        else:
            total += trunk + conv(hid, k + 5, 1)
    return total


@pytest.mark.parametrize(
    "kwargs",
    [dict(), dict(decoupled_head=False), dict(spp_enabled=True, mura_convs=2), dict(det_levels=(16,), mlp_ratio=2)],
)
def test_parameter_count_matches_closed_form(kwargs):
    cfg = ModelConfig(**kwargs)
    assert count_parameters(MuraNetModel(cfg)) == analytic_param_count(cfg)


def test_init_is_deterministic_and_finite():
    cfg = ModelConfig(seed=7)
    a, b = init_model(cfg).state_dict(), init_model(cfg).state_dict()
    assert a.keys() == b.keys()
    for key in a:
        assert torch.equal(a[key], b[key]), key
        assert torch.isfinite(a[key].float()).all()
    other = init_model(ModelConfig(seed=8)).state_dict()
    assert any(not torch.equal(a[k], other[k]) for k in a if a[k].dtype.is_floating_point and a[k].numel() > 1)


def test_init_norm_affine_and_conv_statistics():
    model = init_model(ModelConfig())
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm2d) or type(m).__name__ == "ChannelNorm":
            assert torch.all(m.weight == 1) and torch.all(m.bias == 0)
    w = model.backbone.stages[3].blocks[0].mlp.fc1.weight
    fan_in = w.shape[1]
    assert abs(w.mean().item()) < 0.01
    assert w.std().item() == pytest.approx((2 / fan_in) ** 0.5, rel=0.05)


def test_mura_shape_and_zero_gate():
    m = MURA(32)
    x = torch.randn(1, 32, 64, 64)
    assert m(x).shape == x.shape
    with torch.no_grad():
        m.proj.weight.zero_()
        m.proj.bias.zero_()
    assert torch.equal(m(x), torch.zeros_like(x))
    with pytest.raises(ShapeError):
        m(torch.randn(1, 16, 8, 8))


def test_mura_matches_explicit_formula():
    torch.manual_seed(0)
    m = MURA(4, num_convs=3).double()
    x = torch.randn(2, 4, 9, 9, dtype=torch.double)
    b0 = m.convs[0](x)
    b1 = m.convs[1](b0)
    b2 = m.convs[2](b1)
    expected = m.proj(x + b0 + b1 + b2) * x
    assert torch.allclose(m(x), expected, atol=1e-12)


def test_mura_input_gradient_tight():
    torch.manual_seed(1)
    m = MURA(3).double()
    x = torch.randn(1, 3, 6, 6, dtype=torch.double)
    assert check_gradient(lambda t: m(t).sum(), x) < 1e-5


@pytest.mark.parametrize("size,expected", [(128, (32, 16, 8, 4)), (256, (64, 32, 16, 8)), (1536, (384, 192, 96, 48))])
def test_pyramid_strides(size, expected):
    cfg = ModelConfig(input_size=(size, size), stage_channels=(8, 8, 16, 16), stage_depths=(1, 1, 1, 1))
    bb = Backbone(cfg).eval()
    with torch.no_grad():
        feats = bb(torch.rand(1, 3, size, size))
    assert list(feats) == [4, 8, 16, 32]
    for (stride, f), side, ch in zip(feats.items(), expected, cfg.stage_channels):
        assert f.shape == (1, ch, side, side)
        assert side == size // stride


def test_backbone_rejects_indivisible_input():
    bb = Backbone(ModelConfig())
    with pytest.raises(ShapeError, match="divisible by 32"):
        bb(torch.rand(1, 3, 100, 100))


def test_stage_forward_shapes_and_stride_check():
    cfg = ModelConfig(input_size=(256, 256))
    bb = Backbone(cfg)
    y = stage_forward(bb, torch.rand(1, 3, 256, 256), 0)
    assert y.shape == (1, 32, 64, 64)
    assert stage_forward(bb, y, 1).shape == (1, 64, 32, 32)
    with pytest.raises(ShapeError):
        stage_forward(bb, torch.rand(1, 32, 32, 32), 1)


def test_stage_reduces_to_down_set_when_branches_vanish():
    cfg = ModelConfig(mura_enabled=False)
    stage = Backbone(cfg).stages[1].eval()
    with torch.no_grad():
        for blk in stage.blocks:
            for p in blk.mlp.parameters():
                p.zero_()
        x = torch.randn(1, 32, 32, 32)
        assert torch.equal(stage(x), stage.down(x))


def test_mura_ablation_ignores_mura_parameters():
    cfg = ModelConfig(mura_enabled=False, input_size=(64, 64))
    model = init_model(cfg).eval()
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        before = model.backbone(x)
        for m in model.modules():
            if isinstance(m, MURA):
                for p in m.parameters():
                    p.normal_()
        after = model.backbone(x)
    for s in before:
        assert torch.equal(before[s], after[s])


def test_spp_shape_constant_input_and_wrong_stride():
    spp = SPP(256)
    assert spp(torch.randn(1, 256, 48, 48)).shape == (1, 256, 48, 48)
    small = SPP(2).double()
    x = torch.full((1, 2, 5, 5), 0.3, dtype=torch.double)
    x[:, 1] = -1.5
    expected = small.fuse(torch.cat([x] * 4, dim=1))
    assert torch.allclose(small(x), expected, atol=1e-12)

    cfg = ModelConfig(spp_enabled=True)
    bb = Backbone(cfg)
    assert spp_forward(bb, torch.randn(1, 256, 4, 4)).shape == (1, 256, 4, 4)
    with pytest.raises(ConfigError):
        spp_forward(bb, torch.randn(1, 256, 8, 8))
    with pytest.raises(ConfigError):
        spp_forward(Backbone(ModelConfig()), torch.randn(1, 256, 4, 4))


def test_spp_toggle_leaves_backbone_untouched():
    on = init_model(ModelConfig(spp_enabled=True, seed=3))
    off = init_model(ModelConfig(spp_enabled=False, seed=3))
    shared = {k: v for k, v in on.state_dict().items() if "spp" not in k}
    off.load_state_dict(shared)
    x = torch.rand(1, 3, 128, 128)
    with torch.no_grad():
        on.eval(), off.eval()
        a, b = on.backbone(x), off.backbone(x)
    for s in (4, 8, 16):
        assert torch.equal(a[s], b[s])
    assert not torch.equal(a[32], b[32])


def test_inference_is_bit_deterministic():
    model = init_model(ModelConfig()).eval()
    x = torch.rand(2, 3, 128, 128)
    with torch.no_grad():
        a = model(x)
        b = model(x)
    assert torch.equal(a[0], b[0])
    for s in a[1]:
        assert torch.equal(a[1][s].obj, b[1][s].obj)


def test_checkpoint_round_trip_and_mismatch(tmp_path):
    model = init_model(ModelConfig(seed=5))
    path = tmp_path / "m.pt"
    save_checkpoint(model, path, {"epoch": 3})
    back = load_checkpoint(path)
    assert back.config == model.config
    for k, v in model.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
    with pytest.raises(ShapeError):
        load_checkpoint(path, MuraNetModel(ModelConfig(head_hidden=64)))
