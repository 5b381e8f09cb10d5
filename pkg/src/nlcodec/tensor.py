"""Dense tensor substrate: differentiable ops, gradient checking, parameter files.

All ops operate on ``torch.Tensor`` in float64 and use torch autograd for
reverse-mode differentiation. The functions here add the shape validation and
layout conventions the rest of the package relies on.
"""

from __future__ import annotations

import struct
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError, NumericError, UnsupportedFormatError, UsageError

DTYPE = torch.float64

PARAM_MAGIC = b"NLCP"
PARAM_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def as_tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> torch.Tensor:
    """Cross-correlation of an NCHW input with an (out, in, kh, kw) kernel.

    Output spatial size is ``floor((in + 2*pad - k) / stride) + 1``.
    """
    if x.dim() != 4 or weight.dim() != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"input channels (axis 1) {x.shape[1]} != weight in-channels (axis 1) {weight.shape[1]}")
    if stride < 1:
        raise UsageError(f"stride must be >= 1, got {stride}")
    kh, kw = weight.shape[2:]
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise DimensionError(
            f"kernel {kh}x{kw} does not fit padded input {x.shape[2] + 2 * pad}x{x.shape[3] + 2 * pad} (axes 2, 3)"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    return F.conv2d(x, weight, bias, stride=stride, padding=pad)


def space_to_depth(x: torch.Tensor, factor: int) -> torch.Tensor:
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"spatial dims {h}x{w} not divisible by {factor}")
    x = x.reshape(n, c, h // factor, factor, w // factor, factor)
    return x.permute(0, 1, 3, 5, 2, 4).reshape(n, c * factor * factor, h // factor, w // factor)


def depth_to_space(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Move ``factor**2`` channel groups into ``factor x factor`` spatial cells.

    Channel ``c * factor**2 + i * factor + j`` lands at row offset ``i`` and
    column offset ``j`` of output channel ``c``.
    """
    n, c, h, w = x.shape
    if c % (factor * factor):
        raise DimensionError(f"channel count {c} not divisible by factor^2 = {factor * factor}")
    x = x.reshape(n, c // (factor * factor), factor, factor, h, w)
    return x.permute(0, 1, 4, 2, 5, 3).reshape(n, c // (factor * factor), h * factor, w * factor)


def prelu(x: torch.Tensor, slope: torch.Tensor) -> torch.Tensor:
    """PReLU with a per-channel (axis 1) slope, or a scalar slope for any shape."""
    if slope.numel() == 1:
        return torch.where(x >= 0, x, slope.reshape(()) * x)
    shape = [1] * x.dim()
    shape[1] = -1
    return torch.where(x >= 0, x, slope.reshape(shape) * x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def softmax(x: torch.Tensor, axis: int) -> torch.Tensor:
    return torch.softmax(x, dim=axis)


def backward(loss: torch.Tensor, leaves: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Gradients of a scalar ``loss`` with respect to ``leaves``.

    Leaves the loss does not depend on receive zero gradients.
    """
    if loss.numel() != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss.reshape(()), list(leaves), allow_unused=True)
    return [torch.zeros_like(leaf) if g is None else g for leaf, g in zip(leaves, grads)]


def finite_diff_check(
    f: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor, eps: float = 1e-5
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if not 1e-7 <= eps <= 1e-3:
        raise UsageError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    x = point.detach().clone().to(DTYPE).requires_grad_(True)
    out = f(x)
    if out.numel() != 1:
        raise UsageError("finite_diff_check needs a scalar-valued function")
    if not torch.isfinite(out).all():
        raise NumericError("f is not finite at the check point")
    (analytic,) = backward(out, [x])
    analytic = analytic.detach().reshape(-1)

    flat = x.detach().clone().reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = f(flat.reshape(point.shape)).item()
            flat[i] = orig - eps
            fm = f(flat.reshape(point.shape)).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"f is not finite at probe point for coordinate {i}")
            numeric[i] = (fp - fm) / (2 * eps)
    err = (analytic - numeric).abs() / analytic.abs().clamp(min=1.0)
    return float(err.max()) if err.numel() else 0.0


def _fnv1a64_py(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None

if njit is not None:

    @njit(cache=True)
    def _fnv1a64_jit(buf):
        h = np.uint64(_FNV_OFFSET)
        prime = np.uint64(_FNV_PRIME)
        for b in buf:
            h = (h ^ np.uint64(b)) * prime
        return h


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a; the model hash written into bitstreams."""
    if njit is None or len(data) < 4096:
        return _fnv1a64_py(data)
    return int(_fnv1a64_jit(np.frombuffer(data, dtype=np.uint8)))


def pack_params(tensors: Mapping[str, torch.Tensor | np.ndarray]) -> bytes:
    """Serialize named float64 tensors in the ``NLCP`` little-endian layout.

    Names are written in the mapping's iteration order.
    """
    parts = [PARAM_MAGIC, struct.pack("<BI", PARAM_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.require(arr, dtype="<f8", requirements="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def unpack_params(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != PARAM_MAGIC:
        raise UnsupportedFormatError("not a model parameter file (bad magic)")
    try:
        version, count = struct.unpack_from("<BI", blob, 4)
        if version != PARAM_VERSION:
            raise UnsupportedFormatError(f"unsupported parameter file version {version}")
        off = 9
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 8 * n > len(blob):
                raise UnsupportedFormatError(f"parameter file truncated inside tensor {name!r}")
            out[name] = np.reshape(np.frombuffer(blob, dtype="<f8", count=n, offset=off), tuple(dims)).copy()
            off += 8 * n
    except struct.error as exc:
        raise UnsupportedFormatError(f"parameter file truncated: {exc}") from None
    if off != len(blob):
        raise UnsupportedFormatError("trailing bytes after last tensor")
    return out
