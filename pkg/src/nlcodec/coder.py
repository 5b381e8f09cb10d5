"""Range coding of code blocks driven by the post entropy model.

Symbols are visited group by group (``r + p + q`` ascending) and
lexicographically inside a group. The encoder computes every table in one
teacher-forced pass. The decoder re-evaluates the model once per group on the
partially decoded block. Because every model path is causal, both sides see
bitwise-identical probabilities, and therefore identical integer frequencies.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch

from .ccn import canonical_order, groups
from .errors import CorruptStreamError, ModelMismatchError, UnsupportedFormatError, UsageError
from .quantizer import dequantize

PRECISION = 16
TOTAL = 1 << PRECISION
TOP = 1 << 24
MASK32 = 0xFFFFFFFF

STREAM_MAGIC = b"NLCB"
STREAM_VERSION = 1
_HEADER = struct.Struct("<4sBHHHBQ")
HEADER_SIZE = _HEADER.size


class TableModel(Protocol):
    levels: int
    model_hash: int

    def tables(self, indices: np.ndarray) -> np.ndarray: ...


def freq_quantize(rows: np.ndarray, total: int = TOTAL) -> np.ndarray:
    """Integer frequencies summing to ``total`` with every symbol at least 1.

    Each symbol gets 1 plus its share of the remaining ``total - L`` counts by
    largest remainder; ties in the remainder go to the lower symbol. Works on a
    single row or on any (..., L) stack of rows.
    """
    p = np.asarray(rows, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, p.shape[-1])
    n, l = p.shape
    spare = total - l
    if spare < 0:
        raise UsageError(f"cannot give {l} symbols a frequency of at least 1 out of {total}")
    p = p / p.sum(axis=1, keepdims=True)
    share = p * spare
    base = np.floor(share).astype(np.int64)
    left = spare - base.sum(axis=1)
    rem = share - base
    # stable sort on -rem keeps lower index first among equal remainders
    order = np.argsort(-rem, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(l)[None, :].repeat(n, axis=0), axis=1)
    freq = 1 + base + (rank < left[:, None])
    return freq[0] if single else freq.reshape(np.shape(rows))


def cumulative(freq: np.ndarray) -> np.ndarray:
    c = np.zeros(freq.shape[:-1] + (freq.shape[-1] + 1,), dtype=np.int64)
    np.cumsum(freq, axis=-1, out=c[..., 1:])
    return c


class RangeEncoder:
    """32-bit range coder with byte output and carry propagation."""

    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & MASK32

    def encode(self, start: int, size: int):
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * size
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        # the first byte is always the initial zero cache
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise CorruptStreamError("payload truncated")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, cum: np.ndarray) -> int:
        r = self.range >> PRECISION
        value = self.code // r
        if value >= TOTAL:
            raise CorruptStreamError("code value outside the coding interval")
        sym = int(np.searchsorted(cum, value, side="right")) - 1
        start, size = int(cum[sym]), int(cum[sym + 1] - cum[sym])
        self.code -= r * start
        self.range = r * size
        while self.range < TOP:
            self.code = ((self.code << 8) | self._byte()) & MASK32
            self.range <<= 8
        return sym

    def finish(self):
        # the encoder flushes exactly the bytes the decoder consumes
        if self.pos != len(self.data):
            raise CorruptStreamError(f"{len(self.data) - self.pos} unread payload bytes")


@dataclass(frozen=True)
class Header:
    height: int
    width: int
    channels: int
    levels: int
    model_hash: int
    version: int = STREAM_VERSION


def pack_header(h: Header) -> bytes:
    for name, v, bits in (("height", h.height, 16), ("width", h.width, 16), ("channels", h.channels, 16), ("levels", h.levels, 8)):
        if not 0 <= v < (1 << bits):
            raise UsageError(f"{name}={v} does not fit in {bits} bits")
    return _HEADER.pack(STREAM_MAGIC, h.version, h.height, h.width, h.channels, h.levels, h.model_hash & (2**64 - 1))


def parse_header(data: bytes) -> Header:
    if len(data) < HEADER_SIZE:
        raise UnsupportedFormatError(f"stream shorter than the {HEADER_SIZE}-byte header")
    magic, version, hgt, wid, ch, lv, mh = _HEADER.unpack_from(data, 0)
    if magic != STREAM_MAGIC:
        raise UnsupportedFormatError("not a codec bitstream (bad magic)")
    if version != STREAM_VERSION:
        raise UnsupportedFormatError(f"unsupported bitstream version {version}")
    return Header(hgt, wid, ch, lv, mh, version)


def code_dims(image_dims: tuple[int, int], channels: int, pad_multiple: int, downsample: int = 8):
    h, w = image_dims
    ph = -(-h // pad_multiple) * pad_multiple
    pw = -(-w // pad_multiple) * pad_multiple
    return channels, ph // downsample, pw // downsample


class CodingModel:
    """Adapter exposing a post entropy model as per-position frequency tables."""

    def __init__(self, post, omega: torch.Tensor, model_hash: int, pad_multiple: int = 64):
        self.post = post
        self.omega = omega.detach()
        self.model_hash = model_hash
        self.levels = omega.shape[1]
        self.channels = omega.shape[0]
        self.pad_multiple = pad_multiple

    def tables(self, indices: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            y = dequantize(torch.as_tensor(indices)[None], self.omega)
            return self.post.tables(y)[0].numpy()


def _validate(y: np.ndarray, model: TableModel):
    if y.ndim != 3 or min(y.shape) < 1:
        raise UsageError(f"code block must be a nonempty (M, H, W) array, got shape {y.shape}")
    if y.min() < 0 or y.max() >= model.levels:
        raise UsageError(f"code indices must lie in [0, {model.levels})")


def encode_payload(y: np.ndarray, model: TableModel, schedule: str = "teacher") -> bytes:
    """Arithmetic-code ``y``; ``schedule`` picks how tables are computed.

    ``teacher`` evaluates the model once on the full block. ``group`` mirrors
    the decoder and evaluates it once per group on the known prefix; both must
    give the same bytes.
    """
    y = np.asarray(y, dtype=np.int64)
    _validate(y, model)
    enc = RangeEncoder()
    if schedule == "teacher":
        cum = cumulative(freq_quantize(model.tables(y)))
        for r, p, q in canonical_order(y.shape):
            s = y[r, p, q]
            enc.encode(int(cum[r, p, q, s]), int(cum[r, p, q, s + 1] - cum[r, p, q, s]))
    elif schedule == "group":
        known = np.zeros_like(y)
        for pos in groups(y.shape):
            cum = cumulative(freq_quantize(model.tables(known)))
            for r, p, q in pos:
                s = y[r, p, q]
                enc.encode(int(cum[r, p, q, s]), int(cum[r, p, q, s + 1] - cum[r, p, q, s]))
            known[tuple(pos.T)] = y[tuple(pos.T)]
    else:
        raise UsageError(f"unknown schedule {schedule!r}")
    return enc.finish()


def decode_payload(payload: bytes, dims: tuple[int, int, int], model: TableModel, schedule: str = "group") -> np.ndarray:
    """Inverse of :func:`encode_payload`.

    ``group`` evaluates the model once per group; ``serial`` re-evaluates it
    before every single symbol.
    """
    dec = RangeDecoder(payload)
    y = np.zeros(dims, dtype=np.int64)
    if schedule == "group":
        for pos in groups(dims):
            cum = cumulative(freq_quantize(model.tables(y)))
            for r, p, q in pos:
                y[r, p, q] = dec.decode(cum[r, p, q])
    elif schedule == "serial":
        for r, p, q in canonical_order(dims):
            row = model.tables(y)[r, p, q]
            y[r, p, q] = dec.decode(cumulative(freq_quantize(row)))
    else:
        raise UsageError(f"unknown schedule {schedule!r}")
    dec.finish()
    return y


def encode(y: np.ndarray, model: TableModel, image_dims: tuple[int, int], schedule: str = "teacher") -> bytes:
    """Full bitstream: header followed by the range-coded payload."""
    y = np.asarray(y, dtype=np.int64)
    header = Header(image_dims[0], image_dims[1], y.shape[0], model.levels, model.model_hash)
    return pack_header(header) + encode_payload(y, model, schedule)


def decode(stream: bytes, model: TableModel, dims: tuple[int, int, int] | None = None, schedule: str = "group"):
    """Parse and decode a bitstream, returning ``(header, y)``.

    ``dims`` is the code block shape; when omitted it is derived from the
    header with the model's ``pad_multiple``.
    """
    header = parse_header(stream)
    if header.model_hash != model.model_hash:
        raise ModelMismatchError(
            f"stream was written by model {header.model_hash:016x}, decoder has {model.model_hash:016x}"
        )
    if header.levels != model.levels:
        raise ModelMismatchError(f"stream uses L={header.levels}, model has L={model.levels}")
    channels = getattr(model, "channels", header.channels)
    if header.channels != channels:
        raise ModelMismatchError(f"stream has M={header.channels}, model has M={channels}")
    if dims is None:
        dims = code_dims((header.height, header.width), header.channels, model.pad_multiple)
    return header, decode_payload(stream[HEADER_SIZE:], dims, model, schedule)


def ideal_bits(y: np.ndarray, model: TableModel) -> float:
    """Sum of ``-log2(freq / 2^16)`` over the block under the quantized tables."""
    y = np.asarray(y, dtype=np.int64)
    freq = freq_quantize(model.tables(y))
    f = np.take_along_axis(freq, y[..., None], axis=-1)[..., 0]
    return float(-np.log2(f / TOTAL).sum())

