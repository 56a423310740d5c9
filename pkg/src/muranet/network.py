"""The full multi-task network: shared backbone with segmentation and detection branches."""

from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig
from .heads import DetHead, SegDecoder
from .model import Backbone, init_weights


class MuraNetModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = Backbone(config)
        self.seg_head = SegDecoder(config)
        self.det_head = DetHead(config)

    def forward(self, image):
        pyramid = self.backbone(image)
        return self.seg_head(pyramid), self.det_head(pyramid)

    def reset_parameters(self, seed=None):
        init_weights(self, self.config.seed if seed is None else seed)
        self.det_head.init_priors()
        for m in self.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.reset_running_stats()


def init_model(config: ModelConfig) -> MuraNetModel:
    """Build a model with deterministic initial weights for ``config.seed``."""
    model = MuraNetModel(config)
    model.reset_parameters()
    return model


def param_groups(model: nn.Module):
    """Split parameters into (decayed, not decayed).

    Only conv weights are decayed; biases and normalization scales/offsets are not.
    """
    decay, no_decay = [], []
    norm_params = set()
    for m in model.modules():
        if isinstance(m, nn.BatchNorm2d) or type(m).__name__ == "ChannelNorm":
            norm_params.update(id(p) for p in m.parameters(recurse=False))
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if id(p) in norm_params or p.dim() <= 1:
            no_decay.append((name, p))
        else:
            decay.append((name, p))
    return decay, no_decay


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def seed_everything(seed: int):
    torch.manual_seed(int(seed))
