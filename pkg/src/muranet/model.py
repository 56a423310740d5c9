"""Backbone: MURA attention, down stages, four-level pyramid encoder and SPP."""

from __future__ import annotations

import json
import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, ModelConfig, PYRAMID_STRIDES, ShapeError


class ChannelNorm(nn.Module):
    """Layer normalization over the channel axis of an NCHW tensor."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(1, keepdim=True)
        var = (x - mean).pow(2).mean(1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class MURA(nn.Module):
    """Multi-scale relation attention.

    A chain of depth-wise 3x3 convolutions whose outputs (receptive fields
    3, 5, ..., 2K+1) are summed with the input, mixed by a 1x1 convolution and
    used as a multiplicative gate on the input.
    """

    def __init__(self, channels, num_convs=3):
        super().__init__()
        self.channels = channels
        self.convs = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=1, groups=channels) for _ in range(num_convs)
        )
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"MURA expects (N, {self.channels}, H, W), got {tuple(x.shape)}")
        s = x
        b = x
        for conv in self.convs:
            b = conv(b)
            s = s + b
        return self.proj(s) * x


class ConvMLP(nn.Module):
    def __init__(self, channels, ratio):
        super().__init__()
        hidden = max(1, int(round(channels * ratio)))
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        return self.fc2(self.act(self.dw(self.fc1(x))))


class Block(nn.Module):
    """Pre-norm block with an attention residual and an MLP residual."""

    def __init__(self, channels, mlp_ratio=4.0, mura_convs=3, mura_enabled=True):
        super().__init__()
        self.mura_enabled = mura_enabled
        self.norm1 = ChannelNorm(channels)
        self.attn = MURA(channels, mura_convs)
        self.norm2 = ChannelNorm(channels)
        self.mlp = ConvMLP(channels, mlp_ratio)

    def forward(self, x):
        if self.mura_enabled:
            x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def conv_bn(cin, cout, kernel=3, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
    )


class Stage(nn.Module):
    """Down set (stride-2 conv + BN) followed by ``depth`` blocks.

    The first stage downsamples twice so that its output sits at stride 4.
    """

    def __init__(self, cin, cout, depth, first=False, mlp_ratio=4.0, mura_convs=3, mura_enabled=True):
        super().__init__()
        if first:
            mid = max(1, cout // 2)
            self.down = nn.Sequential(conv_bn(cin, mid, stride=2), nn.GELU(), conv_bn(mid, cout, stride=2))
        else:
            self.down = conv_bn(cin, cout, stride=2)
        self.factor = 4 if first else 2
        self.in_channels = cin
        self.blocks = nn.Sequential(
            *(Block(cout, mlp_ratio, mura_convs, mura_enabled) for _ in range(depth))
        )

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"stage expects (N, {self.in_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[-2] % self.factor or x.shape[-1] % self.factor:
            raise ShapeError(f"stage input {tuple(x.shape[-2:])} not divisible by {self.factor}")
        return self.blocks(self.down(x))


class SPP(nn.Module):
    """Identity plus 5/9/13 max-pools, concatenated and fused back by a 1x1 conv."""

    kernels = (5, 9, 13)

    def __init__(self, channels):
        super().__init__()
        self.fuse = nn.Conv2d(channels * (len(self.kernels) + 1), channels, 1)

    def forward(self, x):
        pooled = [F.max_pool2d(x, k, stride=1, padding=k // 2) for k in self.kernels]
        return self.fuse(torch.cat([x, *pooled], dim=1))


class Backbone(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        chans = (3, *config.stage_channels)
        self.stages = nn.ModuleList(
            Stage(
                chans[i],
                chans[i + 1],
                config.stage_depths[i],
                first=(i == 0),
                mlp_ratio=config.mlp_ratio,
                mura_convs=config.mura_convs,
                mura_enabled=config.mura_enabled,
            )
            for i in range(4)
        )
        self.spp = SPP(config.stage_channels[-1]) if config.spp_enabled else None

    def forward(self, image):
        check_image(image, self.config)
        feats = {}
        x = image
        for stride, stage in zip(PYRAMID_STRIDES, self.stages):
            x = stage(x)
            feats[stride] = x
        if self.spp is not None:
            feats[32] = self.spp(feats[32])
        return feats


def check_image(image, config=None):
    if image.dim() != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected an image batch (N, 3, H, W), got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % 32 or w % 32:
        raise ShapeError(f"input size not divisible by 32: {(h, w)}")


def stage_forward(backbone: Backbone, x, stage_index):
    """Run one stage after checking that ``x`` sits at the stage's input stride."""
    in_stride = 1 if stage_index == 0 else PYRAMID_STRIDES[stage_index - 1]
    h, w = backbone.config.input_size
    expected = (h // in_stride, w // in_stride)
    if tuple(x.shape[-2:]) != expected:
        raise ShapeError(
            f"stage {stage_index + 1} expects stride-{in_stride} input of size {expected}, "
            f"got {tuple(x.shape[-2:])}"
        )
    return backbone.stages[stage_index](x)


def spp_forward(backbone: Backbone, x):
    if backbone.spp is None:
        raise ConfigError("spp_enabled: SPP block is disabled in this model")
    h, w = backbone.config.input_size
    if tuple(x.shape[-2:]) != (h // 32, w // 32):
        raise ConfigError(f"spp applies to the stride-32 map only, got size {tuple(x.shape[-2:])}")
    return backbone.spp(x)


def init_weights(module: nn.Module, seed: int):
    """Deterministic initialisation: He-normal convs, unit/zero norm affine."""
    gen = torch.Generator().manual_seed(int(seed))
    for name, m in module.named_modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm2d, ChannelNorm)):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def save_checkpoint(model, path, extra=None):
    """Write parameters and buffers plus the model config as one archive."""
    from .config import to_dict

    payload = {
        "config": json.dumps(to_dict(model.config)),
        "state": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    if extra:
        payload["extra"] = json.dumps(extra)
    torch.save(payload, path)


def load_checkpoint(path, model=None):
    """Load an archive written by :func:`save_checkpoint`.

    When ``model`` is given its config must match the stored shapes; otherwise a
    fresh :class:`~muranet.network.MuraNetModel` is built from the stored config.
    """
    from .network import MuraNetModel

    payload = torch.load(path, map_location="cpu", weights_only=True)
    config = ModelConfig(**json.loads(payload["config"]))
    if model is None:
        model = MuraNetModel(config)
    own = model.state_dict()
    state = payload["state"]
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise ShapeError(f"checkpoint keys do not match model: missing={missing[:5]} unexpected={unexpected[:5]}")
    for key, value in state.items():
        if tuple(own[key].shape) != tuple(value.shape):
            raise ShapeError(f"checkpoint tensor {key}: shape {tuple(value.shape)} != {tuple(own[key].shape)}")
    model.load_state_dict(state)
    return model
