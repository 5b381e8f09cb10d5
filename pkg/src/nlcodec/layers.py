"""Parameterized building blocks over the tensor ops."""

from __future__ import annotations

import math

import torch
from torch import nn

from . import tensor as T


PRELU_GAIN = math.sqrt(2.0 / (1.0 + 0.25**2))


class Conv(nn.Module):
    """Plain convolution with fan-in scaled uniform init.

    The default gain keeps activation variance roughly constant through a
    PReLU with slope 0.25, so deep stacks do not start with a vanishing signal.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, gain: float = PRELU_GAIN):
        super().__init__()
        self.stride = stride
        self.pad = kernel // 2
        bound = gain * math.sqrt(3.0 / (c_in * kernel * kernel))
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel, kernel, dtype=T.DTYPE).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(c_out, dtype=T.DTYPE))

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class PReLU(nn.Module):
    def __init__(self, channels: int, init: float = 0.25):
        super().__init__()
        self.slope = nn.Parameter(torch.full((channels,), init, dtype=T.DTYPE))

    def forward(self, x):
        return T.prelu(x, self.slope)


class Upsample(nn.Module):
    """Channel-expanding conv followed by depth-to-space."""

    def __init__(self, c_in: int, c_out: int, factor: int, kernel: int):
        super().__init__()
        self.factor = factor
        self.conv = Conv(c_in, c_out * factor * factor, kernel)

    def forward(self, x):
        return T.depth_to_space(self.conv(x), self.factor)
