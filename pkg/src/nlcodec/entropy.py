"""Context entropy models over code blocks.

Both models share the same backbone: the non-local attention block followed by
hidden masked convolutions and residual blocks. The mixture model predicts a
3-parameter Gaussian mixture per code and is used for the rate term during
training; the post model predicts the L-way table directly and drives the
arithmetic coder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from . import tensor as T
from .ccn import HIDDEN, CCNResidualBlock, MaskedConv
from .layers import PReLU
from .nonlocal_block import NonlocalAttention

PROB_FLOOR = 1e-9
SCALE_MIN, SCALE_MAX = 1e-3, 1e3


@dataclass(frozen=True)
class EntropyConfig:
    channels: int = 32
    levels: int = 8
    components: int = 3
    local_blocks: int = 3
    feature_blocks: int = 3
    res_blocks: int = 3
    k_s: int = 2
    use_nonlocal: bool = True


class MoGField(NamedTuple):
    """Mixture parameters, each shaped (B, M, H, W, C)."""

    weight: torch.Tensor
    mean: torch.Tensor
    scale: torch.Tensor


class ContextBackbone(nn.Module):
    def __init__(self, cfg: EntropyConfig):
        super().__init__()
        m, n = cfg.channels, cfg.feature_blocks
        self.attention = NonlocalAttention(m, cfg.local_blocks, cfg.k_s, cfg.use_nonlocal)
        self.inp = MaskedConv(self.attention.out_blocks, n, m, cfg.k_s, HIDDEN)
        self.inp_act = PReLU(n * m)
        self.res = nn.Sequential(*(CCNResidualBlock(n, m, cfg.k_s) for _ in range(cfg.res_blocks)))

    def forward(self, y):
        return self.res(self.inp_act(self.inp(self.attention(y))))


def _blocks_last(x: torch.Tensor, blocks: int, channels: int) -> torch.Tensor:
    b, _, h, w = x.shape
    return x.reshape(b, blocks, channels, h, w).permute(0, 2, 3, 4, 1)


class MoGEntropyModel(nn.Module):
    def __init__(self, cfg: EntropyConfig):
        super().__init__()
        self.cfg = cfg
        m, n, c = cfg.channels, cfg.feature_blocks, cfg.components
        self.backbone = ContextBackbone(cfg)
        self.weight_head = MaskedConv(n, c, m, cfg.k_s, HIDDEN)
        self.mean_head = MaskedConv(n, c, m, cfg.k_s, HIDDEN)
        self.scale_head = MaskedConv(n, c, m, cfg.k_s, HIDDEN)
        with torch.no_grad():
            # start with means spread over (0, 1) and moderate scales
            self.mean_head.bias.copy_(torch.linspace(0.2, 0.8, c, dtype=T.DTYPE))
            self.scale_head.bias.fill_(math.log(0.2))

    def forward(self, y) -> MoGField:
        feats = self.backbone(y)
        return mog_heads(feats, self.weight_head, self.mean_head, self.scale_head, self.cfg)


def mog_heads(feats, weight_head, mean_head, scale_head, cfg: EntropyConfig) -> MoGField:
    c, m = cfg.components, cfg.channels
    logits = _blocks_last(weight_head(feats), c, m)
    mean = _blocks_last(mean_head(feats), c, m)
    raw = _blocks_last(scale_head(feats), c, m)
    scale = torch.exp(raw.clamp(math.log(SCALE_MIN), math.log(SCALE_MAX)))
    return MoGField(T.softmax(logits, axis=-1), mean, scale)


def normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


def interval_bounds(omega: torch.Tensor) -> torch.Tensor:
    """Midpoints between consecutive centers, (M, L) -> (M, L - 1)."""
    return 0.5 * (omega[:, 1:] + omega[:, :-1])


def mog_table(field: MoGField, omega: torch.Tensor) -> torch.Tensor:
    """Probability of every center for every code, (B, M, H, W, L).

    The outer intervals extend to -inf and +inf, so each row sums to one.
    """
    bounds = interval_bounds(omega)  # (M, L-1)
    bnd = bounds[None, :, None, None, None, :]  # (1, M, 1, 1, 1, L-1)
    z = (bnd - field.mean.unsqueeze(-1)) / field.scale.unsqueeze(-1)
    cdf = (field.weight.unsqueeze(-1) * normal_cdf(z)).sum(dim=-2)  # (B, M, H, W, L-1)
    zeros = torch.zeros_like(cdf[..., :1])
    # the last interval is 1 - cdf so that the telescoping sum is exact
    full = torch.cat([zeros, cdf, zeros + 1.0], dim=-1)
    return full[..., 1:] - full[..., :-1]


def mog_likelihood(indices: torch.Tensor, field: MoGField, omega: torch.Tensor) -> torch.Tensor:
    """Probability of the chosen center per code, (B, M, H, W)."""
    m, l = omega.shape
    bounds = interval_bounds(omega)
    idx = torch.as_tensor(indices, dtype=torch.long)
    ch = torch.arange(m).reshape(1, m, 1, 1).expand_as(idx)
    lo_idx = (idx - 1).clamp(min=0)
    hi_idx = idx.clamp(max=l - 2)
    lo = bounds[ch, lo_idx].unsqueeze(-1)
    hi = bounds[ch, hi_idx].unsqueeze(-1)
    cdf_lo = (field.weight * normal_cdf((lo - field.mean) / field.scale)).sum(-1)
    cdf_hi = (field.weight * normal_cdf((hi - field.mean) / field.scale)).sum(-1)
    cdf_lo = torch.where(idx == 0, torch.zeros_like(cdf_lo), cdf_lo)
    cdf_hi = torch.where(idx == l - 1, torch.ones_like(cdf_hi), cdf_hi)
    return cdf_hi - cdf_lo


def discrete_prob(level: int, weight, mean, scale, omega_r) -> torch.Tensor:
    """Mixture mass of the interval around center ``level`` for a single code.

    ``weight``, ``mean`` and ``scale`` are length-C vectors; ``omega_r`` is the
    L centers of the code's channel.
    """
    omega_r = torch.as_tensor(omega_r, dtype=T.DTYPE)
    l = omega_r.shape[0]
    if level > 0:
        a = 0.5 * (omega_r[level - 1] + omega_r[level])
        lo = (weight * normal_cdf((a - mean) / scale)).sum()
    else:
        lo = torch.zeros((), dtype=T.DTYPE)
    if level < l - 1:
        b = 0.5 * (omega_r[level] + omega_r[level + 1])
        hi = (weight * normal_cdf((b - mean) / scale)).sum()
    else:
        hi = torch.ones((), dtype=T.DTYPE)
    return hi - lo


def rate_loss(prob: torch.Tensor) -> torch.Tensor:
    """Total bits, ``-sum log2 P`` with probabilities floored at 1e-9."""
    return -torch.log2(prob.clamp(min=PROB_FLOOR)).sum()


def floor_renormalize(table: torch.Tensor, floor: float = PROB_FLOOR) -> torch.Tensor:
    t = table.clamp(min=floor)
    return t / t.sum(dim=-1, keepdim=True)


class PostEntropyModel(nn.Module):
    """Backbone plus one masked conv producing L logits per code."""

    def __init__(self, cfg: EntropyConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = ContextBackbone(cfg)
        self.head = MaskedConv(cfg.feature_blocks, cfg.levels, cfg.channels, cfg.k_s, HIDDEN)

    def logits(self, y) -> torch.Tensor:
        """(B, M, H, W, L) unnormalized log-probabilities."""
        return _blocks_last(self.head(self.backbone(y)), self.cfg.levels, self.cfg.channels)

    def forward(self, y) -> torch.Tensor:
        return T.softmax(self.logits(y), axis=-1)

    def tables(self, y) -> torch.Tensor:
        return floor_renormalize(self(y))


def post_heads(feats: torch.Tensor, head: MaskedConv, cfg: EntropyConfig) -> torch.Tensor:
    return floor_renormalize(T.softmax(_blocks_last(head(feats), cfg.levels, cfg.channels), axis=-1))


def post_loss(tables: torch.Tensor, indices) -> torch.Tensor:
    """Mean code length in bits per code under one-hot truth."""
    idx = torch.as_tensor(indices, dtype=torch.long)
    p = torch.gather(tables, -1, idx.unsqueeze(-1)).squeeze(-1)
    return -torch.log2(p.clamp(min=PROB_FLOOR)).mean()


def post_loss_from_logits(logits: torch.Tensor, indices) -> torch.Tensor:
    idx = torch.as_tensor(indices, dtype=torch.long)
    logp = torch.log_softmax(logits, dim=-1)
    return -torch.gather(logp, -1, idx.unsqueeze(-1)).mean() / math.log(2.0)


def empirical_entropy(indices: np.ndarray, levels: int) -> float:
    """Bits per code of the marginal symbol histogram."""
    counts = np.bincount(np.asarray(indices).reshape(-1), minlength=levels).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())
