"""Analysis and synthesis transforms built from U-Net style blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import tensor as T
from .errors import DimensionError
from .layers import Conv, PReLU, Upsample

DOWNSAMPLE = 8


@dataclass(frozen=True)
class UnetBlockConfig:
    width: int
    multipliers: tuple[int, int, int] = (2, 2, 2)
    kernel: int = 3

    def __post_init__(self):
        if any(a < 1 for a in self.multipliers):
            raise ValueError(f"multipliers must be >= 1, got {self.multipliers}")

    @property
    def multiple(self) -> int:
        return math.prod(self.multipliers)


class UnetBlock(nn.Module):
    """Three strided convs down, three conv+depth-to-space stages up.

    The feature entering each downsampling step is added back to the
    upsampled feature at the same scale, so spatial size and width are kept.
    """

    def __init__(self, cfg: UnetBlockConfig):
        super().__init__()
        self.cfg = cfg
        w, k = cfg.width, cfg.kernel
        self.down = nn.ModuleList(Conv(w, w, k, stride=a) for a in cfg.multipliers)
        self.down_act = nn.ModuleList(PReLU(w) for _ in cfg.multipliers)
        # up[0] undoes multipliers[2], up[2] undoes multipliers[0]
        self.up = nn.ModuleList(Upsample(w, w, a, k) for a in reversed(cfg.multipliers))
        self.up_act = nn.ModuleList(PReLU(w) for _ in cfg.multipliers)

    def forward(self, x):
        h, w = x.shape[2:]
        m = self.cfg.multiple
        if h % m or w % m:
            raise DimensionError(f"UnetBlock input {h}x{w} must be a multiple of {m} on both spatial axes")
        skips = []
        for conv, act in zip(self.down, self.down_act):
            skips.append(x)
            x = act(conv(x))
        for up, act, skip in zip(self.up, self.up_act, reversed(skips)):
            x = act(up(x)) + skip
        return x


@dataclass(frozen=True)
class TransformConfig:
    width: int = 192
    latent_channels: int = 32
    multipliers: tuple[int, int, int] = (2, 2, 2)
    down_kernel: int = 5
    block_kernel: int = 3
    out_kernel: int = 3

    @property
    def pad_multiple(self) -> int:
        """Input images must be a multiple of this on both spatial axes."""
        return DOWNSAMPLE * math.prod(self.multipliers)


class AnalysisTransform(nn.Module):
    """Image (N, 3, H, W) -> latent z in (0, 1)^(N, M, H/8, W/8)."""

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        block = UnetBlockConfig(w, cfg.multipliers, cfg.block_kernel)
        self.down = nn.ModuleList(Conv(3 if i == 0 else w, w, cfg.down_kernel, stride=2) for i in range(3))
        self.acts = nn.ModuleList(PReLU(w) for _ in range(3))
        self.blocks = nn.ModuleList(UnetBlock(block) for _ in range(3))
        self.out = Conv(w, cfg.latent_channels, cfg.out_kernel, gain=1.0)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise DimensionError(f"analysis expects N x 3 x H x W, got {tuple(x.shape)}")
        m = self.cfg.pad_multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise DimensionError(f"image {x.shape[2]}x{x.shape[3]} must be padded to a multiple of {m}")
        for down, act, block in zip(self.down, self.acts, self.blocks):
            x = block(act(down(x)))
        return T.sigmoid(self.out(x))


class SynthesisTransform(nn.Module):
    """Dequantized codes (N, M, H, W) -> image (N, 3, 8H, 8W)."""

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        block = UnetBlockConfig(w, cfg.multipliers, cfg.block_kernel)
        self.inp = Conv(cfg.latent_channels, w, cfg.out_kernel)
        self.inp_act = PReLU(w)
        self.blocks = nn.ModuleList(UnetBlock(block) for _ in range(3))
        self.up = nn.ModuleList(Upsample(w, w, 2, cfg.block_kernel) for _ in range(3))
        self.acts = nn.ModuleList(PReLU(w) for _ in range(3))
        self.out = Conv(w, 3, cfg.out_kernel, gain=0.1)
        with torch.no_grad():
            self.out.bias.fill_(0.5)  # start at mid-gray

    def forward(self, y):
        if y.dim() != 4 or y.shape[1] != self.cfg.latent_channels:
            raise DimensionError(
                f"synthesis expects N x {self.cfg.latent_channels} x H x W, got {tuple(y.shape)}"
            )
        x = self.inp_act(self.inp(y))
        for block, up, act in zip(self.blocks, self.up, self.acts):
            x = act(up(block(x)))
        return self.out(x)


def pad_replicate(image: np.ndarray | torch.Tensor, factor: int = DOWNSAMPLE):
    """Replicate the bottom/right edges up to the next multiple of ``factor``.

    Accepts a (C, H, W) or (N, C, H, W) array and returns ``(padded, (H, W))``.
    """
    h, w = image.shape[-2:]
    if h == 0 or w == 0:
        raise DimensionError("cannot pad an empty image")
    ph, pw = -h % factor, -w % factor
    if isinstance(image, torch.Tensor):
        rows = torch.cat([image, image[..., -1:, :].expand(*image.shape[:-2], ph, w)], dim=-2) if ph else image
        out = torch.cat([rows, rows[..., :, -1:].expand(*rows.shape[:-1], pw)], dim=-1) if pw else rows
        return out, (h, w)
    pad = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(image, pad, mode="edge"), (h, w)


def crop(image, dims: tuple[int, int]):
    h, w = dims
    return image[..., :h, :w]
