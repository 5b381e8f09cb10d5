"""Command line entry point: train, extract-codes, train-post, encode, decode, eval, selftest.

Exit codes: 0 success, 1 verification failure, 2 input error, 3 format or
model mismatch.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .errors import (
    CorruptStreamError,
    DimensionError,
    InputError,
    ModelMismatchError,
    NumericError,
    UnsupportedFormatError,
    UsageError,
)
from .imageio import list_images, read_image, write_image
from .metrics import bpp, ms_ssim, psnr, to_uint8
from .model import Codec, CodecConfig, write_atomic
from .training import TrainConfig, extract_codes, load_images, train, train_post, warm_start_post

log = logging.getLogger("nlcodec")

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_FORMAT = 0, 1, 2, 3
CODES_MAGIC = "nlcodec-codes-1"


def _seed(args):
    torch.manual_seed(args.seed)
    if args.threads:
        torch.set_num_threads(args.threads)


def _load_model(path) -> Codec:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such model file: {path}")
    return Codec.load(path)


def save_codes(path, blocks, levels: int):
    """Store code blocks (possibly of different shapes) in one ``.npz`` file."""
    arrays = {f"block_{i:06d}": np.asarray(b, dtype=np.uint8) for i, b in enumerate(blocks)}
    buf = io.BytesIO()
    np.savez_compressed(buf, magic=np.array(CODES_MAGIC), levels=np.array(levels), **arrays)
    write_atomic(path, buf.getvalue())


def load_codes(path) -> tuple[list[np.ndarray], int]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such code file: {path}")
    try:
        with np.load(path) as z:
            if "magic" not in z or str(z["magic"]) != CODES_MAGIC:
                raise UnsupportedFormatError(f"{path} is not a code dataset")
            keys = sorted(k for k in z.files if k.startswith("block_"))
            return [z[k].astype(np.int64) for k in keys], int(z["levels"])
    except (OSError, ValueError) as exc:
        if isinstance(exc, UnsupportedFormatError):
            raise
        raise UnsupportedFormatError(f"{path}: unreadable code dataset ({exc})") from None


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    over = {k: getattr(args, k) for k in ("lam", "distortion", "patch_size", "batch_size", "warmup_steps", "width", "latent_channels") if getattr(args, k) is not None}
    if args.lr is not None:
        over["lr_levels"] = tuple(args.lr)
    cfg = TrainConfig(**{**cfg.__dict__, **over, "seed": args.seed})
    images = load_images(args.images)
    if not images:
        raise InputError(f"no readable PNG/PPM images in {args.images}")
    if args.init:
        model = _load_model(args.init)
    else:
        model = Codec(CodecConfig.build(width=cfg.width, latent_channels=cfg.latent_channels))
    t0 = time.perf_counter()
    hist = train(model, images, cfg, metrics_csv=args.metrics, steps=args.steps)
    model.save(args.out)
    last = hist[-1] if hist else None
    if last is not None:
        print(f"{len(hist)} steps in {time.perf_counter() - t0:.1f}s; L_D={last.distortion:.6g} L_R={last.rate:.4f} bits/code")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_extract_codes(args) -> int:
    model = _load_model(args.model)
    files = list_images(args.images)
    if not files:
        raise InputError(f"no PNG/PPM images in {args.images}")
    rng = np.random.default_rng(args.seed)
    blocks = extract_codes(model, args.images, crop=args.crop, rng=rng, per_image=args.per_image, augment=args.augment)
    if not blocks:
        raise InputError(f"no readable images in {args.images}")
    save_codes(args.out, blocks, model.cfg.entropy.levels)
    print(f"wrote {len(blocks)} code blocks to {args.out}")
    return EXIT_OK


def cmd_train_post(args) -> int:
    model = _load_model(args.model)
    blocks, levels = load_codes(args.codes)
    if levels != model.cfg.entropy.levels:
        raise ModelMismatchError(f"codes use L={levels}, model has L={model.cfg.entropy.levels}")
    m = model.cfg.entropy.channels
    if any(b.shape[0] != m for b in blocks):
        raise ModelMismatchError(f"code blocks must have {m} channels")
    shapes = {b.shape for b in blocks}
    if len(shapes) != 1:
        raise InputError(f"code blocks have mixed shapes {sorted(shapes)}; extract with a fixed --crop")
    with torch.no_grad():
        omega = model.quantizer.centers()
    if args.warm_start:
        warm_start_post(model.post, model.entropy)
    rep = train_post(
        model.post,
        omega,
        blocks,
        steps=args.steps,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        eval_every=args.eval_every,
    )
    model.save(args.out or args.model)
    print(f"train {rep.train_bits:.4f} bits/code, held-out {rep.heldout_bits:.4f} bits/code")
    return EXIT_OK


def cmd_encode(args) -> int:
    model = _load_model(args.model)
    image = read_image(args.input)
    t0 = time.perf_counter()
    stream = model.compress(image)
    write_atomic(args.output, stream)
    print(f"{len(stream)} bytes, {bpp(stream, image.shape[1:]):.4f} bpp, {time.perf_counter() - t0:.2f}s")
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _load_model(args.model)
    path = Path(args.input)
    if not path.is_file():
        raise InputError(f"no such stream: {path}")
    t0 = time.perf_counter()
    x = model.decompress(path.read_bytes(), schedule=args.schedule)
    write_image(args.output, x)
    print(f"decoded {x.shape[2]}x{x.shape[1]} in {time.perf_counter() - t0:.2f}s")
    return EXIT_OK


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"


def evaluate(model: Codec, files) -> list[dict]:
    rows = []
    for f in files:
        x = read_image(f)
        stream = model.compress(x)
        # score the reconstruction a decoder would write to disk
        x_hat = to_uint8(model.decompress(stream)) / 255.0
        rows.append(
            {
                "image": f.name,
                "bytes": len(stream),
                "bpp": bpp(stream, x.shape[1:]),
                "psnr_db": psnr(x, x_hat),
                "ms_ssim": ms_ssim(x, x_hat).item(),
            }
        )
    return rows


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    files = list_images(args.dir)
    if not files:
        raise InputError(f"no PNG/PPM images in {args.dir}")
    rows = evaluate(model, files)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image", "bytes", "bpp", "psnr_db", "ms_ssim"])
    for r in rows:
        w.writerow([r["image"], r["bytes"], _fmt(r["bpp"]), _fmt(r["psnr_db"]), _fmt(r["ms_ssim"])])
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("bytes", "bpp", "psnr_db", "ms_ssim")}
    w.writerow(["mean", _fmt(mean["bytes"]), _fmt(mean["bpp"]), _fmt(mean["psnr_db"]), _fmt(mean["ms_ssim"])])
    write_atomic(args.out, buf.getvalue().encode())
    print(f"{len(rows)} images: {mean['bpp']:.4f} bpp, {_fmt(mean['psnr_db'])} dB, MS-SSIM {mean['ms_ssim']:.4f}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    failures = run_selftest(seed=args.seed, verbose=True)
    if failures:
        for name, msg in failures:
            print(f"FAIL {name}: {msg}", file=sys.stderr)
        return EXIT_VERIFY
    print("all invariants hold")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (0 keeps the default)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nlcodec", description="Learned image codec with a non-local context model.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="joint rate-distortion training")
    t.add_argument("--images", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--init", help="start from an existing model file")
    t.add_argument("--steps", type=int)
    t.add_argument("--lam", type=float)
    t.add_argument("--lr", type=float, nargs="+")
    t.add_argument("--distortion", choices=("mse", "ms-ssim"))
    t.add_argument("--patch-size", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--warmup-steps", type=int)
    t.add_argument("--width", type=int)
    t.add_argument("--latent-channels", type=int)
    t.add_argument("--metrics", help="CSV of step, L_D, L_R, lr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract-codes", parents=[common], help="quantized code crops for post-model training")
    e.add_argument("--model", required=True)
    e.add_argument("--images", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--crop", type=int, default=60)
    e.add_argument("--per-image", type=int, default=1)
    e.add_argument("--augment", action="store_true", help="also code the 7 other flips and quarter turns")
    e.set_defaults(func=cmd_extract_codes)

    tp = sub.add_parser("train-post", parents=[common], help="fit the post entropy model on extracted codes")
    tp.add_argument("--model", required=True)
    tp.add_argument("--codes", required=True)
    tp.add_argument("--out", help="defaults to overwriting --model")
    tp.add_argument("--steps", type=int, default=2000)
    tp.add_argument("--lr", type=float, default=1e-3)
    tp.add_argument("--batch-size", type=int, default=8)
    tp.add_argument("--warm-start", action="store_true", help="start from the mixture model's context backbone")
    tp.add_argument("--eval-every", type=int, default=0, help="keep the checkpoint with the best held-out bits")
    tp.set_defaults(func=cmd_train_post)

    en = sub.add_parser("encode", parents=[common], help="compress a PNG/PPM image")
    en.add_argument("--model", required=True)
    en.add_argument("--input", required=True)
    en.add_argument("--output", required=True)
    en.set_defaults(func=cmd_encode)

    de = sub.add_parser("decode", parents=[common], help="reconstruct an image from a bitstream")
    de.add_argument("--model", required=True)
    de.add_argument("--input", required=True)
    de.add_argument("--output", required=True)
    de.add_argument("--schedule", choices=("group", "serial"), default="group")
    de.set_defaults(func=cmd_decode)

    ev = sub.add_parser("eval", parents=[common], help="bpp, PSNR and MS-SSIM over a folder")
    ev.add_argument("--model", required=True)
    ev.add_argument("--dir", required=True)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    st = sub.add_parser("selftest", parents=[common], help="check invariants on small random models")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    _seed(args)
    try:
        return args.func(args)
    except (InputError, UsageError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (UnsupportedFormatError, ModelMismatchError, CorruptStreamError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
