"""Triple encoder-decoder (TED) backbone.

Two weight-shared temporal encoders produce ``X^u`` (1/4 scale) and ``X^v``
(1/8 scale).  A change branch fuses the two ``X^v`` maps, and three necks
lift everything back to a common ``C_v x H/4 x W/4`` grid.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ConfigError


def norm2d(channels: int) -> nn.GroupNorm:
    # GroupNorm keeps the two temporal passes independent of batch composition.
    return nn.GroupNorm(math.gcd(channels, 8), channels)


def conv3x3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)


def conv1x1(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)


class ResidualBlock(nn.Module):
    """Basic two-conv residual unit with an optional strided projection shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = conv3x3(in_ch, out_ch, stride)
        self.norm1 = norm2d(out_ch)
        self.conv2 = conv3x3(out_ch, out_ch)
        self.norm2 = norm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(conv1x1(in_ch, out_ch, stride), norm2d(out_ch))

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + identity)


class Encoder(nn.Module):
    def __init__(self, in_ch: int, channels_u: int, channels_v: int, depth: int = 1):
        super().__init__()
        stem_ch = max(channels_u // 2, 1)
        self.stem = nn.Sequential(conv3x3(in_ch, stem_ch, stride=2), norm2d(stem_ch), nn.ReLU())
        self.stage1 = nn.Sequential(
            ResidualBlock(stem_ch, channels_u, stride=2),
            *[ResidualBlock(channels_u, channels_u) for _ in range(depth - 1)],
        )
        self.stage2 = nn.Sequential(
            ResidualBlock(channels_u, channels_v, stride=2),
            *[ResidualBlock(channels_v, channels_v) for _ in range(depth - 1)],
        )

    def forward(self, image):
        h, w = image.shape[-2:]
        if h % 8 or w % 8:
            raise ConfigError(f"input size {h}x{w} is not divisible by 8")
        x_u = self.stage1(self.stem(image))
        x_v = self.stage2(x_u)
        return x_u, x_v


class ChangeBranch(nn.Module):
    """Concatenate the deepest temporal features and refine with residual layers."""

    def __init__(self, channels_v: int, num_layers: int = 6):
        super().__init__()
        self.fuse = nn.Sequential(conv1x1(2 * channels_v, channels_v), norm2d(channels_v), nn.ReLU())
        self.layers = nn.Sequential(*[ResidualBlock(channels_v, channels_v) for _ in range(num_layers)])

    def forward(self, x1_v, x2_v):
        if x1_v.shape != x2_v.shape:
            raise ConfigError(f"change branch inputs differ: {tuple(x1_v.shape)} vs {tuple(x2_v.shape)}")
        return self.layers(self.fuse(torch.cat([x1_v, x2_v], dim=1)))


class Neck(nn.Module):
    """Upsample the 1/8 map, concatenate the 1/4 skip map, project to ``out_ch``."""

    def __init__(self, skip_ch: int, deep_ch: int, out_ch: int):
        super().__init__()
        self.project = nn.Sequential(conv1x1(skip_ch + deep_ch, out_ch), norm2d(out_ch), nn.ReLU())
        self.refine = nn.Sequential(conv3x3(out_ch, out_ch), norm2d(out_ch), nn.ReLU())

    def forward(self, x_u, x_v):
        if x_u.shape[-2] != 2 * x_v.shape[-2] or x_u.shape[-1] != 2 * x_v.shape[-1]:
            raise ConfigError(f"neck scale mismatch: skip {tuple(x_u.shape[-2:])} "
                              f"vs deep {tuple(x_v.shape[-2:])}")
        up = F.interpolate(x_v, size=x_u.shape[-2:], mode="bilinear", align_corners=False)
        return self.refine(self.project(torch.cat([x_u, up], dim=1)))


class TedOutputs(NamedTuple):
    x1: torch.Tensor
    x2: torch.Tensor
    xc: torch.Tensor


class TED(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cu, cv = cfg.channels_u, cfg.channels_v
        self.encoder = Encoder(cfg.input_channels, cu, cv, cfg.encoder_depth)
        self.change_branch = ChangeBranch(cv, cfg.change_layers)
        self.neck1 = Neck(cu, cv, cv)
        self.neck2 = None if cfg.share_temporal_necks else Neck(cu, cv, cv)
        # the change neck sees both temporal skip maps
        self.neck_c = Neck(2 * cu, cv, cv)

    def encode(self, image):
        return self.encoder(image)

    def forward(self, image1, image2) -> TedOutputs:
        x1_u, x1_v = self.encoder(image1)
        x2_u, x2_v = self.encoder(image2)
        xc_v = self.change_branch(x1_v, x2_v)
        neck2 = self.neck1 if self.neck2 is None else self.neck2
        return TedOutputs(
            self.neck1(x1_u, x1_v),
            neck2(x2_u, x2_v),
            self.neck_c(torch.cat([x1_u, x2_u], dim=1), xc_v),
        )


def init_conv_weights(module: nn.Module) -> None:
    """He fan-in init for convolutions, unit/zero affine for norms."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
