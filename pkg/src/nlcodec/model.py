"""The full codec: transforms, quantizer, training entropy model and post model."""

from __future__ import annotations

import dataclasses
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import coder
from . import tensor as T
from .entropy import EntropyConfig, MoGEntropyModel, PostEntropyModel
from .errors import UnsupportedFormatError
from .quantizer import Quantizer, dequantize
from .transforms import AnalysisTransform, SynthesisTransform, TransformConfig, crop, pad_replicate

_CFG_PREFIX = "cfg/"


@dataclass(frozen=True)
class CodecConfig:
    transform: TransformConfig = field(default_factory=TransformConfig)
    entropy: EntropyConfig = field(default_factory=EntropyConfig)

    @classmethod
    def desk(cls, **entropy_overrides) -> "CodecConfig":
        """Width 32, 32 latent channels: small enough to train on a CPU."""
        return cls.build(width=32, latent_channels=32, **entropy_overrides)

    @classmethod
    def build(cls, width=192, latent_channels=32, levels=8, components=3, multipliers=(2, 2, 2), **entropy_kw):
        t = TransformConfig(width=width, latent_channels=latent_channels, multipliers=tuple(multipliers))
        e = EntropyConfig(channels=latent_channels, levels=levels, components=components, **entropy_kw)
        return cls(t, e)

    def to_flat(self) -> dict[str, float]:
        out = {}
        for part in ("transform", "entropy"):
            for k, v in dataclasses.asdict(getattr(self, part)).items():
                out[f"{part}.{k}"] = v
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, np.ndarray]) -> "CodecConfig":
        def part(name, klass):
            kw = {}
            for f in dataclasses.fields(klass):
                key = f"{name}.{f.name}"
                if key not in flat:
                    raise UnsupportedFormatError(f"model file lacks config entry {key!r}")
                v = np.asarray(flat[key]).reshape(-1)
                if f.name == "multipliers":
                    kw[f.name] = tuple(int(x) for x in v)
                elif f.name == "use_nonlocal":
                    kw[f.name] = bool(v[0])
                else:
                    kw[f.name] = int(v[0])
            return klass(**kw)

        return cls(part("transform", TransformConfig), part("entropy", EntropyConfig))


class Codec(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        if cfg.transform.latent_channels != cfg.entropy.channels:
            raise ValueError("transform latent channels and entropy channels differ")
        self.cfg = cfg
        self.analysis = AnalysisTransform(cfg.transform)
        self.synthesis = SynthesisTransform(cfg.transform)
        self.quantizer = Quantizer(cfg.entropy.channels, cfg.entropy.levels)
        self.entropy = MoGEntropyModel(cfg.entropy)
        self.post = PostEntropyModel(cfg.entropy)
        self._hash: int | None = None

    @property
    def pad_multiple(self) -> int:
        return self.cfg.transform.pad_multiple

    # -- serialization -------------------------------------------------

    def to_bytes(self) -> bytes:
        tensors: dict[str, np.ndarray] = {}
        for k, v in self.cfg.to_flat().items():
            tensors[_CFG_PREFIX + k] = np.atleast_1d(np.asarray(v, dtype=np.float64))
        for name, p in sorted(self.state_dict().items()):
            tensors[name] = p.detach().numpy()
        return T.pack_params(tensors)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Codec":
        flat = T.unpack_params(blob)
        cfg = CodecConfig.from_flat({k[len(_CFG_PREFIX):]: v for k, v in flat.items() if k.startswith(_CFG_PREFIX)})
        model = cls(cfg)
        state = {k: torch.as_tensor(v, dtype=T.DTYPE) for k, v in flat.items() if not k.startswith(_CFG_PREFIX)}
        try:
            model.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise UnsupportedFormatError(f"model file does not match its own config: {exc}") from None
        model._hash = T.fnv1a64(blob)
        return model

    def save(self, path: str | os.PathLike):
        write_atomic(path, self.to_bytes())
        self._hash = None

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Codec":
        return cls.from_bytes(Path(path).read_bytes())

    @property
    def model_hash(self) -> int:
        """FNV-1a 64 of the serialized model; recomputed after any save."""
        if self._hash is None:
            self._hash = T.fnv1a64(self.to_bytes())
        return self._hash

    def invalidate_hash(self):
        self._hash = None

    # -- coding --------------------------------------------------------

    def coding_model(self) -> coder.CodingModel:
        with torch.no_grad():
            omega = self.quantizer.centers()
        return coder.CodingModel(self.post, omega, self.model_hash, self.pad_multiple)

    def image_to_codes(self, image: np.ndarray) -> np.ndarray:
        """(3, H, W) image in [0, 1] -> (M, H', W') index block."""
        padded, _ = pad_replicate(np.asarray(image, dtype=np.float64), self.pad_multiple)
        with torch.no_grad():
            z = self.analysis(torch.as_tensor(padded)[None])
            return self.quantizer.quantize(z)[0]

    def codes_to_image(self, indices: np.ndarray, dims: tuple[int, int] | None = None) -> np.ndarray:
        with torch.no_grad():
            y = dequantize(torch.as_tensor(indices)[None], self.quantizer.centers())
            x = self.synthesis(y)[0].numpy()
        return crop(x, dims) if dims is not None else x

    def compress(self, image: np.ndarray) -> bytes:
        y = self.image_to_codes(image)
        return coder.encode(y, self.coding_model(), image.shape[-2:])

    def decompress(self, stream: bytes, schedule: str = "group") -> np.ndarray:
        header, y = coder.decode(stream, self.coding_model(), schedule=schedule)
        return self.codes_to_image(y, (header.height, header.width))


def write_atomic(path: str | os.PathLike, data: bytes):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
