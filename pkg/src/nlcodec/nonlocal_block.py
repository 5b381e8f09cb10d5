"""Non-local context modeling with a proxy similarity.

For a target code ``y[r, p, q]`` the value itself is unknown at decode time, so
the similarity between positions ``(p, q)`` and ``(u, v)`` is measured on the
already-decoded channels ``0..r-1`` at those positions. The weights are a
softmin of that distance over the positions of earlier anti-diagonals
(``u + v < p + q``); the same weights average the channel-``r`` codes (the
non-local estimate) and the distances themselves (a confidence score, lower is
better).
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import nn

from . import tensor as T
from .ccn import HIDDEN, INPUT, MaskedConv
from .errors import DimensionError


class NonlocalOutputs(NamedTuple):
    rep: torch.Tensor
    conf: torch.Tensor
    valid: torch.Tensor


def proxy_distance(y: torch.Tensor, r: int, pq: tuple[int, int], uv: tuple[int, int], wd: torch.Tensor):
    """Weighted squared distance between the channel prefixes ``y[:r]`` at two positions.

    ``y`` is (M, H, W) center values and ``wd`` is (M, M) with row ``r``
    holding the weights of channels ``0..r-1``.
    """
    (p, q), (u, v) = pq, uv
    d = (y[:r, p, q] - y[:r, u, v]) ** 2
    return (wd[r, :r] * d).sum()


def spatial_mask(p: int, q: int, u: int, v: int) -> int:
    return int(u + v < p + q)


def context_mask(h: int, w: int) -> torch.Tensor:
    """(HW, HW) bool; entry [P, U] says U lies on an earlier anti-diagonal than P."""
    diag = (torch.arange(h)[:, None] + torch.arange(w)[None, :]).reshape(-1)
    return diag[None, :] < diag[:, None]


def proxy_distances(y: torch.Tensor, wd: torch.Tensor) -> torch.Tensor:
    """All-pairs proxy distances, (B, M, H, W) -> (B, M, HW, HW).

    ``wd`` must be zero on and above the diagonal.
    """
    b, m, h, w = y.shape
    yf = y.reshape(b, m, h * w)
    diff2 = (yf[:, :, :, None] - yf[:, :, None, :]) ** 2
    return torch.einsum("rj,bjpu->brpu", wd, diff2)


def nonlocal_weights(dist: torch.Tensor, ctx: torch.Tensor):
    """Masked softmin over the last axis; rows with no context are all zero.

    Returns ``(weights, valid)`` with ``valid`` of shape ``dist.shape[:-1]``.
    """
    neg = torch.where(ctx, -dist, -math.inf)
    valid = ctx.any(dim=-1).expand(dist.shape[:-1])
    shift = torch.where(valid, neg.amax(dim=-1), 0.0).detach()
    e = torch.exp(neg - shift.unsqueeze(-1))
    z = e.sum(dim=-1)
    z = torch.where(valid, z, 1.0)
    return e / z.unsqueeze(-1), valid


def nonlocal_context(y: torch.Tensor, wd: torch.Tensor) -> NonlocalOutputs:
    """Non-local representation and confidence for every code.

    ``y`` is (B, M, H, W); outputs are (B, M, H, W) and zero where there is no
    context (the first anti-diagonal).
    """
    b, m, h, w = y.shape
    dist = proxy_distances(y, wd)
    ctx = context_mask(h, w)
    wts, valid = nonlocal_weights(dist, ctx)
    yf = y.reshape(b, m, h * w)
    rep = torch.einsum("brpu,bru->brp", wts, yf)
    conf = (wts * dist).sum(dim=-1)
    shape = (b, m, h, w)
    return NonlocalOutputs(rep.reshape(shape), conf.reshape(shape), valid.reshape(shape))


def _check_block(y):
    if y.dim() != 3:
        raise DimensionError(f"expected an (M, H, W) block, got {tuple(y.shape)}")


def nonlocal_weight_plane(y: torch.Tensor, r: int, pq: tuple[int, int], wd: torch.Tensor) -> torch.Tensor:
    """(H, W) weights that position ``pq`` of channel ``r`` assigns to each context position."""
    _check_block(y)
    m, h, w = y.shape
    dist = proxy_distances(y.unsqueeze(0), wd)[0, r]
    wts, _ = nonlocal_weights(dist, context_mask(h, w))
    return wts[pq[0] * w + pq[1]].reshape(h, w)


def nonlocal_rep(y: torch.Tensor, r: int, wd: torch.Tensor) -> torch.Tensor:
    _check_block(y)
    return nonlocal_context(y.unsqueeze(0), wd).rep[0, r]


def confidence(y: torch.Tensor, r: int, wd: torch.Tensor) -> torch.Tensor:
    _check_block(y)
    return nonlocal_context(y.unsqueeze(0), wd).conf[0, r]


class ProxyWeights(nn.Module):
    """Nonnegative channel weights, stored as logarithms, initialized to 1/(r+1)."""

    def __init__(self, channels: int):
        super().__init__()
        r = torch.arange(channels, dtype=T.DTYPE)
        init = (-torch.log(r + 1)).unsqueeze(1).expand(channels, channels).clone()
        self.log_w = nn.Parameter(init)
        self.register_buffer("tri", torch.tril(torch.ones(channels, channels, dtype=T.DTYPE), -1), persistent=False)

    def forward(self):
        return torch.exp(self.log_w) * self.tri


class NonlocalAttention(nn.Module):
    """Fuses local masked-conv features with the gated non-local estimate.

    Output has ``local_blocks + 1`` feature blocks: the local features followed
    by ``sigmoid(att(local, conf)) * rep``. With ``use_nonlocal = False`` the last
    block is zero, which gives the local-only ablation.
    """

    def __init__(self, channels: int, local_blocks: int = 3, k_s: int = 2, use_nonlocal: bool = True):
        super().__init__()
        self.channels = channels
        self.use_nonlocal = use_nonlocal
        self.local = MaskedConv(1, local_blocks, channels, k_s, INPUT)
        self.proxy = ProxyWeights(channels)
        self.att = MaskedConv(local_blocks + 1, 1, channels, k_s, HIDDEN)
        self.force_alpha: float | None = None

    @property
    def out_blocks(self) -> int:
        return self.local.out_blocks + 1

    def forward(self, y):
        if y.shape[1] != self.channels:
            raise DimensionError(f"attention expects {self.channels} code channels, got {y.shape[1]}")
        local = self.local(y)
        if not self.use_nonlocal:
            return torch.cat([local, torch.zeros_like(y)], dim=1)
        nl = nonlocal_context(y, self.proxy())
        if self.force_alpha is not None:
            alpha = torch.full_like(y, self.force_alpha)
        else:
            alpha = T.sigmoid(self.att(torch.cat([local, nl.conf], dim=1)))
        return torch.cat([local, alpha * nl.rep], dim=1)
