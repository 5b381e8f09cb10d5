"""Trainable per-channel scalar quantizer with a straight-through gradient."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from . import tensor as T
from .errors import DimensionError


def centers(sigma: torch.Tensor) -> torch.Tensor:
    """Cumulative sums of ``exp(sigma)`` along the last axis.

    >>> centers(torch.zeros(4, dtype=torch.float64)).tolist()
    [1.0, 2.0, 3.0, 4.0]
    """
    return torch.cumsum(torch.exp(sigma), dim=-1)


def nearest_index(z: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """Index of the nearest center per code; exact midpoints go to the lower index.

    ``z`` is (..., M, H, W) and ``omega`` is (M, L).
    """
    if z.shape[-3] != omega.shape[0]:
        raise DimensionError(f"z has {z.shape[-3]} channels, quantizer has {omega.shape[0]}")
    w = omega.detach().reshape(omega.shape[0], 1, 1, omega.shape[1])
    d = (z.detach().unsqueeze(-1) - w) ** 2
    # argmin returns the first minimum, which is the lower index on ties
    return torch.argmin(d, dim=-1)


def dequantize(indices: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """Center values for an (..., M, H, W) index tensor."""
    m, l = omega.shape
    idx = torch.as_tensor(indices, dtype=torch.long)
    flat = idx.movedim(-3, -1).reshape(-1, m)
    vals = torch.gather(omega.unsqueeze(0).expand(flat.shape[0], m, l), 2, flat.unsqueeze(-1)).squeeze(-1)
    return vals.reshape(*idx.movedim(-3, -1).shape).movedim(-1, -3)


def quantize(z: torch.Tensor, omega: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest-center indices and the center values they select."""
    idx = nearest_index(z, omega)
    return idx, dequantize(idx, omega)


def straight_through(z: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Forward returns ``values``, backward passes the gradient to ``z`` unchanged."""
    return z + (values - z).detach()


def quant_loss(values: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    if values.shape != z.shape:
        raise DimensionError(f"shape mismatch {tuple(values.shape)} vs {tuple(z.shape)}")
    return ((values - z) ** 2).mean()


class Quantizer(nn.Module):
    """Holds the per-channel log interval widths (M, L).

    Initialized so that the centers are ``i / (L + 1)`` for ``i = 1..L``.
    """

    def __init__(self, channels: int, levels: int = 8):
        super().__init__()
        self.levels = levels
        self.sigma = nn.Parameter(torch.full((channels, levels), -math.log(levels + 1), dtype=T.DTYPE))

    def centers(self) -> torch.Tensor:
        return centers(self.sigma)

    def forward(self, z: torch.Tensor, training: bool = True):
        """Quantize ``z``.

        Returns ``(indices, y, qloss)`` where ``y`` carries the straight-through
        gradient into ``z`` and ``qloss`` only reaches ``sigma``.
        """
        omega = self.centers()
        idx = nearest_index(z, omega)
        vals = dequantize(idx, omega)
        y = straight_through(z, vals.detach()) if training else vals.detach()
        return idx, y, quant_loss(vals, z.detach())

    def quantize(self, z: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return nearest_index(z, self.centers()).cpu().numpy()
