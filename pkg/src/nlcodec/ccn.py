"""Masked 3-D context convolutions over code blocks and the group schedule.

A code block ``y`` of shape (M, H, W) is processed as an NCHW tensor whose
channel axis stacks ``blocks`` feature blocks of M channels each: channel
``i * M + r`` is channel ``r`` of feature block ``i``. A code at ``(r, p, q)``
belongs to group ``r + p + q``; features at that position may only depend on
codes from strictly smaller groups.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import tensor as T
from .errors import DimensionError, UsageError
from .layers import PReLU

INPUT = "input"
HIDDEN = "hidden"


def build_mask(kind: str, k_s: int, channels: int) -> np.ndarray:
    """0/1 mask indexed ``[r, s, u + k_s, v + k_s]``.

    Input layers keep taps with ``s + u + v < r``; hidden layers also keep the
    current group, ``s + u + v <= r``.
    """
    if k_s < 0:
        raise UsageError(f"k_s must be >= 0, got {k_s}")
    r = np.arange(channels)[:, None, None, None]
    s = np.arange(channels)[None, :, None, None]
    u = np.arange(-k_s, k_s + 1)[None, None, :, None]
    v = np.arange(-k_s, k_s + 1)[None, None, None, :]
    if kind == INPUT:
        m = s + u + v < r
    elif kind == HIDDEN:
        m = s + u + v <= r
    else:
        raise UsageError(f"unknown mask kind {kind!r}")
    return m.astype(np.float64)


class MaskedConv(nn.Module):
    """Masked convolution from ``in_blocks`` to ``out_blocks`` feature blocks.

    Bias is shared by all channels of an output block. Borders are zero padded.
    Setting ``unmasked = True`` disables the mask; it exists only so that tests
    can check that the causality probe notices a broken model.
    """

    def __init__(self, in_blocks: int, out_blocks: int, channels: int, k_s: int = 2, kind: str = HIDDEN):
        super().__init__()
        self.in_blocks, self.out_blocks, self.channels = in_blocks, out_blocks, channels
        self.k_s, self.kind = k_s, kind
        self.unmasked = False
        m = torch.as_tensor(build_mask(kind, k_s, channels), dtype=T.DTYPE)
        self.register_buffer("mask", m.repeat(out_blocks, in_blocks, 1, 1), persistent=False)
        k = 2 * k_s + 1
        fan_in = max(1.0, float(self.mask[:channels].sum(dim=(1, 2, 3)).mean()))
        bound = 1.0 / math.sqrt(fan_in)
        c_in, c_out = in_blocks * channels, out_blocks * channels
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k, k, dtype=T.DTYPE).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(out_blocks, dtype=T.DTYPE))

    def forward(self, x):
        if x.shape[1] != self.in_blocks * self.channels:
            raise DimensionError(
                f"masked conv expects {self.in_blocks} blocks x {self.channels} channels, got {x.shape[1]} channels"
            )
        w = self.weight if self.unmasked else self.weight * self.mask
        bias = self.bias.repeat_interleave(self.channels)
        return T.conv2d(x, w, bias, stride=1, pad=self.k_s)


class CCNResidualBlock(nn.Module):
    """Two hidden masked convs with PReLU and an additive skip."""

    def __init__(self, blocks: int, channels: int, k_s: int = 2):
        super().__init__()
        self.conv1 = MaskedConv(blocks, blocks, channels, k_s, HIDDEN)
        self.act1 = PReLU(blocks * channels)
        self.conv2 = MaskedConv(blocks, blocks, channels, k_s, HIDDEN)
        self.act2 = PReLU(blocks * channels)

    def forward(self, x):
        return x + self.act2(self.conv2(self.act1(self.conv1(x))))


def group_of(r: int, p: int, q: int, dims: tuple[int, int, int] | None = None) -> int:
    if dims is not None:
        m, h, w = dims
        if not (0 <= r < m and 0 <= p < h and 0 <= q < w):
            raise UsageError(f"position {(r, p, q)} outside code block {dims}")
    elif min(r, p, q) < 0:
        raise UsageError(f"negative index in {(r, p, q)}")
    return r + p + q


def num_groups(dims: tuple[int, int, int]) -> int:
    m, h, w = dims
    return m + h + w - 2


def group_index(dims: tuple[int, int, int]) -> np.ndarray:
    """(M, H, W) array holding each position's group."""
    m, h, w = dims
    return np.arange(m)[:, None, None] + np.arange(h)[None, :, None] + np.arange(w)[None, None, :]


def groups(dims: tuple[int, int, int]) -> list[np.ndarray]:
    """Positions of each group as (n, 3) arrays of (r, p, q) in lexicographic order."""
    g = group_index(dims)
    pos = np.argwhere(np.ones(dims, dtype=bool))  # lexicographic already
    key = g.reshape(-1)
    return [pos[key == k] for k in range(num_groups(dims))]


def canonical_order(dims: tuple[int, int, int]) -> np.ndarray:
    """All positions, groups ascending, (r, p, q) lexicographic within a group."""
    return np.concatenate(groups(dims), axis=0)


def causality_probe(
    table_fn: Callable[[np.ndarray], np.ndarray],
    y: np.ndarray,
    k: int,
    levels: int,
    rng: np.random.Generator | None = None,
    trials: int = 1,
) -> float:
    """Worst change of any table in groups ``<= k`` when groups ``>= k`` are redrawn.

    ``table_fn`` maps an (M, H, W) index block to per-position probability
    tables (M, H, W, L). A causal model returns 0.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    dims = y.shape
    g = group_index(dims)
    keep = g <= k
    future = g >= k
    base = table_fn(y)
    worst = 0.0
    for _ in range(trials):
        if not future.any():
            break
        y2 = y.copy()
        y2[future] = rng.integers(0, levels, size=int(future.sum()))
        other = table_fn(y2)
        worst = max(worst, float(np.abs(other[keep] - base[keep]).max(initial=0.0)))
    return worst
