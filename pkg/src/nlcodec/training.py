"""Rate-distortion training, post-model training and code extraction."""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import torch

from . import tensor as T
from .entropy import mog_likelihood, post_loss, post_loss_from_logits, rate_loss
from .errors import InputError, NumericError, UsageError
from .imageio import list_images, read_image
from .metrics import distortion
from .quantizer import dequantize
from .transforms import pad_replicate

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2)


@dataclass
class TrainConfig:
    lam: float = 0.1
    distortion: str = "mse"
    lr_levels: tuple[float, ...] = (1e-5, 1e-6, 1e-7)
    patience: int = 5
    patch_size: int = 256
    batch_size: int = 8
    warmup_steps: int = 2000
    max_steps: int = 100_000
    steps_per_epoch: int = 100
    seed: int = 0
    width: int = 192
    latent_channels: int = 32
    code_crop: int = 60
    post_steps: int = 2000
    post_batch_size: int = 8
    proxy_lr_scale: float = 10.0

    def __post_init__(self):
        if self.lam <= 0:
            raise UsageError(f"lambda must be positive, got {self.lam}")
        if self.patch_size % 8:
            raise UsageError(f"patch size {self.patch_size} is not a multiple of 8")
        if self.distortion not in ("mse", "ms-ssim"):
            raise UsageError(f"distortion must be mse or ms-ssim, got {self.distortion!r}")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            kw[key] = _parse_value(fields[key], value)
        return cls(**kw)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _parse_value(f: dataclasses.Field, value: str):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if kind.startswith("tuple"):
        return tuple(float(v) for v in value.split(","))
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


class PlateauSchedule:
    """Steps down through ``levels`` when the epoch loss stalls for ``patience`` epochs.

    ``done`` becomes true once the last level has plateaued as well.
    """

    def __init__(self, levels: Iterable[float] = (1e-5, 1e-6, 1e-7), patience: int = 5):
        self.levels = tuple(levels)
        self.patience = patience
        self.level = 0
        self.best = math.inf
        self.stalled = 0
        self.done = False

    @property
    def lr(self) -> float:
        return self.levels[min(self.level, len(self.levels) - 1)]

    def update(self, epoch_loss: float) -> float:
        if epoch_loss < self.best:
            self.best = epoch_loss
            self.stalled = 0
        else:
            self.stalled += 1
        if self.stalled >= self.patience:
            self.stalled = 0
            if self.level == len(self.levels) - 1:
                self.done = True
            else:
                self.level += 1
        return self.lr


def lr_schedule(history: Iterable[float], levels=(1e-5, 1e-6, 1e-7), patience: int = 5):
    """Learning rate after replaying a history of epoch losses, or None once training should stop."""
    sched = PlateauSchedule(levels, patience)
    for loss in history:
        sched.update(loss)
        if sched.done:
            return None
    return sched.lr


def make_adam(module, lr: float, proxy_lr_scale: float = 10.0) -> torch.optim.Adam:
    """Adam with a larger step for the non-local proxy log-weights.

    The proxy weights start at 1/(r+1) while neighbouring center values differ
    by about 1/L, so the softmin starts out nearly flat. The weights have to
    grow by two to three orders of magnitude before the non-local estimate
    picks out matching positions, which takes far longer than the rest of the
    network needs at a shared step size.
    """
    proxy = [p for n, p in module.named_parameters() if n.endswith("proxy.log_w")]
    ids = {id(p) for p in proxy}
    groups = [{"params": [p for p in module.parameters() if id(p) not in ids], "lr_scale": 1.0}]
    if proxy:
        groups.append({"params": proxy, "lr": lr * proxy_lr_scale, "lr_scale": proxy_lr_scale})
    return torch.optim.Adam(groups, lr=lr)


class RDLoss(NamedTuple):
    distortion: float
    rate: float  # bits per code
    qloss: float
    total: float


def rd_loss(model, x: torch.Tensor, lam: float, metric: str = "mse", use_rate: bool = True):
    """Differentiable ``L_D + lam * L_R + L_q`` and its components.

    ``L_R`` is bits per code under the mixture model. Centers are detached in
    the rate term so only the quantization loss moves them.
    """
    z = model.analysis(x)
    idx, y, qloss = model.quantizer(z, training=True)
    x_hat = model.synthesis(y)
    dist = distortion(x, x_hat, metric)
    field = model.entropy(y)
    p = mog_likelihood(idx, field, model.quantizer.centers().detach())
    rate = rate_loss(p) / idx.numel()
    total = dist + (lam * rate if use_rate else 0.0) + qloss
    return total, dist, rate, qloss


def rd_step(model, optimizer, batch: torch.Tensor, cfg: TrainConfig, use_rate: bool = True) -> RDLoss:
    """One optimizer step on the joint objective."""
    optimizer.zero_grad(set_to_none=True)
    total, dist, rate, qloss = rd_loss(model, batch, cfg.lam, cfg.distortion, use_rate)
    if not torch.isfinite(total):
        raise NumericError(
            f"non-finite loss: distortion={dist.item()}, rate={rate.item()}, qloss={qloss.item()}; step skipped"
        )
    total.backward()
    optimizer.step()
    model.invalidate_hash()
    # report the objective actually optimized in this step
    return RDLoss(dist.item(), rate.item(), qloss.item(), total.item())


def random_patches(images: list[np.ndarray], n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((n, 3, size, size))
    for i in range(n):
        img = images[rng.integers(len(images))]
        if img.shape[1] < size or img.shape[2] < size:
            img, _ = pad_replicate(img, size)
        top = rng.integers(0, img.shape[1] - size + 1)
        left = rng.integers(0, img.shape[2] - size + 1)
        out[i] = img[:, top : top + size, left : left + size]
    return out


def train(model, images: list[np.ndarray], cfg: TrainConfig, metrics_csv=None, steps: int | None = None):
    """Joint training with a distortion-only warmup and plateau learning-rate drops.

    Returns the list of per-step :class:`RDLoss`. ``steps`` caps the run below
    ``cfg.max_steps``.
    """
    rng = np.random.default_rng(cfg.seed)
    sched = PlateauSchedule(cfg.lr_levels, cfg.patience)
    opt = make_adam(model, sched.lr, cfg.proxy_lr_scale)
    limit = cfg.max_steps if steps is None else min(steps, cfg.max_steps)
    history: list[RDLoss] = []
    epoch: list[float] = []
    writer = None
    fh = None
    if metrics_csv is not None:
        fh = open(metrics_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "L_D", "L_R", "lr"])
    try:
        for step in range(limit):
            batch = torch.as_tensor(random_patches(images, cfg.batch_size, cfg.patch_size, rng))
            res = rd_step(model, opt, batch, cfg, use_rate=step >= cfg.warmup_steps)
            history.append(res)
            epoch.append(res.total)
            if writer is not None:
                writer.writerow([step, repr(res.distortion), repr(res.rate), repr(sched.lr)])
            if len(epoch) == cfg.steps_per_epoch:
                if step >= cfg.warmup_steps:
                    lr = sched.update(float(np.mean(epoch)))
                    for g in opt.param_groups:
                        g["lr"] = lr * g["lr_scale"]
                    if sched.done:
                        log.info("loss plateaued at the last learning rate; stopping at step %d", step)
                        break
                epoch = []
    finally:
        if fh is not None:
            fh.close()
    return history


def dihedral(image: np.ndarray):
    """The eight flips and quarter turns of a (C, H, W) image."""
    for k in range(4):
        r = np.rot90(image, k, axes=(1, 2))
        yield np.ascontiguousarray(r)
        yield np.ascontiguousarray(r[:, :, ::-1])


def extract_codes(
    model,
    images,
    crop: int | None = 60,
    rng: np.random.Generator | None = None,
    per_image: int = 1,
    augment: bool = False,
):
    """Quantized code blocks of ``images``, randomly cropped to ``crop x crop``.

    ``images`` is a list of (3, H, W) arrays or a folder of PNG/PPM files;
    unreadable files are skipped with a warning. With ``augment`` every image
    is also coded in its seven other flips and quarter turns, which gives the
    post model eight times as many blocks from the same pictures.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if isinstance(images, (str, Path)):
        loaded = []
        for p in list_images(images):
            try:
                loaded.append(read_image(p))
            except InputError as exc:
                log.warning("skipping %s", exc)
        images = loaded
    if augment:
        images = [v for img in images for v in dihedral(img)]
    out = []
    for img in images:
        y = model.image_to_codes(img)
        if crop is None:
            out.append(y)
            continue
        m, h, w = y.shape
        ch, cw = min(crop, h), min(crop, w)
        for _ in range(per_image):
            top = rng.integers(0, h - ch + 1)
            left = rng.integers(0, w - cw + 1)
            out.append(y[:, top : top + ch, left : left + cw].copy())
    return out


def bits_per_code(post, omega: torch.Tensor, blocks) -> float:
    """Cross-entropy of the post model's floored tables on ``blocks``."""
    total, count = 0.0, 0
    with torch.no_grad():
        for y in blocks:
            idx = torch.as_tensor(np.asarray(y))[None]
            tables = post.tables(dequantize(idx, omega))
            total += float(post_loss(tables, idx)) * idx.numel()
            count += idx.numel()
    return total / count


def warm_start_post(post, mog):
    """Copy the mixture model's trained context backbone into the post model."""
    post.backbone.load_state_dict(mog.backbone.state_dict())


class PostReport(NamedTuple):
    train_bits: float
    heldout_bits: float
    losses: list


def train_post(
    post,
    omega: torch.Tensor,
    blocks,
    steps: int = 2000,
    lr: float = 1e-3,
    batch_size: int = 8,
    holdout: float = 0.2,
    seed: int = 0,
    heldout_blocks=None,
    eval_every: int = 0,
    proxy_lr_scale: float = 10.0,
) -> PostReport:
    """Fit the post model to code blocks by minimizing bits per code.

    A ``holdout`` fraction of ``blocks`` is reserved for the reported held-out
    bits unless ``heldout_blocks`` is given. With ``eval_every > 0`` the
    held-out bits are measured every ``eval_every`` steps and the parameters
    with the lowest value are kept, which stops small code datasets from
    being memorized.
    """
    blocks = [np.asarray(b) for b in blocks]
    rng = np.random.default_rng(seed)
    if heldout_blocks is None:
        order = rng.permutation(len(blocks))
        n_hold = max(1, int(round(holdout * len(blocks)))) if len(blocks) > 1 else 0
        heldout_blocks = [blocks[i] for i in order[:n_hold]]
        blocks = [blocks[i] for i in order[n_hold:]] or heldout_blocks
        # a single block is both the training and the held-out set
        heldout_blocks = heldout_blocks or blocks
    omega = omega.detach()
    data = torch.as_tensor(np.stack(blocks))
    values = dequantize(data, omega)
    opt = make_adam(post, lr, proxy_lr_scale)
    losses = []
    best_bits, best_state = math.inf, None
    for step in range(steps + 1):
        if eval_every > 0 and (step % eval_every == 0 or step == steps):
            bits = bits_per_code(post, omega, heldout_blocks)
            if bits < best_bits:
                best_bits, best_state = bits, copy.deepcopy(post.state_dict())
        if step == steps:
            break
        sel = torch.as_tensor(rng.integers(0, len(blocks), size=min(batch_size, len(blocks))))
        opt.zero_grad(set_to_none=True)
        loss = post_loss_from_logits(post.logits(values[sel]), data[sel])
        loss.backward()
        opt.step()
        losses.append(loss.item())
    if best_state is not None:
        post.load_state_dict(best_state)
    return PostReport(bits_per_code(post, omega, blocks), bits_per_code(post, omega, heldout_blocks), losses)


def load_images(folder) -> list[np.ndarray]:
    images = []
    for p in list_images(folder):
        try:
            images.append(read_image(p))
        except InputError as exc:
            log.warning("skipping %s", exc)
    return images

