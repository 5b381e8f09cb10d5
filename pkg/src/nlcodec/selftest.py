"""Invariant checks on small randomly initialized models.

Used by ``nlcodec selftest``. Setting the environment variable
``NLCODEC_SELFTEST_SABOTAGE=mask`` disables every convolution mask before the
checks run, which must make the causality checks fail.
"""

from __future__ import annotations

import os
import time

import numpy as np
import torch

from . import tensor as T
from .ccn import HIDDEN, INPUT, MaskedConv, build_mask, causality_probe, num_groups
from .coder import CodingModel, decode_payload, encode_payload, ideal_bits
from .entropy import EntropyConfig, MoGEntropyModel, MoGField, PostEntropyModel, discrete_prob, mog_table
from .metrics import ms_ssim
from .nonlocal_block import NonlocalAttention
from .quantizer import Quantizer, dequantize, quantize

SABOTAGE_ENV = "NLCODEC_SELFTEST_SABOTAGE"


def _sabotage(*modules):
    if os.environ.get(SABOTAGE_ENV) == "mask":
        for mod in modules:
            for m in mod.modules():
                if isinstance(m, MaskedConv):
                    m.unmasked = True


def _small_cfg(m):
    return EntropyConfig(channels=m, local_blocks=2, feature_blocks=2, res_blocks=1, k_s=1)


def check_masks(rng):
    for kind in (INPUT, HIDDEN):
        for k_s in (0, 1, 2):
            mask = build_mask(kind, k_s, 4)
            r, s, u, v = np.meshgrid(np.arange(4), np.arange(4), np.arange(-k_s, k_s + 1), np.arange(-k_s, k_s + 1), indexing="ij")
            want = (s + u + v < r) if kind == INPUT else (s + u + v <= r)
            if not np.array_equal(mask, want.astype(float)):
                return f"{kind} mask with k_s={k_s} disagrees with its inequality"
    return None


def check_causality(rng):
    for trial in range(4):
        m = int(rng.integers(1, 5))
        dims = (m, int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        omega = Quantizer(m).centers().detach()
        post, mog = PostEntropyModel(_small_cfg(m)), MoGEntropyModel(_small_cfg(m))
        _sabotage(post, mog)

        def post_tables(y):
            return post(dequantize(torch.as_tensor(y)[None], omega)).detach()[0].numpy()

        def mog_tables(y):
            return mog_table(mog(dequantize(torch.as_tensor(y)[None], omega)), omega).detach()[0].numpy()

        y = rng.integers(0, 8, size=dims)
        for k in range(num_groups(dims) + 1):
            for name, fn in (("post", post_tables), ("mixture", mog_tables)):
                worst = causality_probe(fn, y, k, 8, rng)
                if worst > 1e-12:
                    return f"{name} model tables in groups <= {k} moved by {worst:.3g} for dims {dims}"
    return None


def check_normalization(rng):
    omega = Quantizer(2).centers().detach()
    shape = (200, 2, 1, 1, 3)
    w = torch.softmax(torch.as_tensor(rng.normal(size=shape)), -1)
    f = MoGField(w, torch.as_tensor(rng.uniform(-0.5, 1.5, shape)), torch.as_tensor(np.exp(rng.uniform(-6, 3, shape))))
    err = (mog_table(f, omega).sum(-1) - 1).abs().max().item()
    if err > 1e-6:
        return f"mixture tables off by {err:.3g}"
    post = PostEntropyModel(_small_cfg(2))
    p = post(torch.rand(3, 2, 4, 4, dtype=T.DTYPE))
    err = (p.sum(-1) - 1).abs().max().item()
    if err > 1e-9:
        return f"post tables off by {err:.3g}"
    return None


def check_round_trip(rng):
    for seed in range(3):
        m = int(rng.integers(1, 4))
        model = CodingModel(PostEntropyModel(_small_cfg(m)), Quantizer(m).centers(), model_hash=seed)
        _sabotage(model.post)
        y = rng.integers(0, 8, size=(m, int(rng.integers(1, 5)), int(rng.integers(1, 5))))
        payload = encode_payload(y, model)
        back = decode_payload(payload, y.shape, model)
        if not np.array_equal(back, y):
            return f"decoded block differs from the encoded one for shape {y.shape}"
        if 8 * len(payload) - ideal_bits(y, model) > 64:
            return "payload exceeds the ideal code length by more than 64 bits"
    return None


def check_gradients(rng):
    conv = MaskedConv(2, 2, 3, 1, HIDDEN)
    x = torch.as_tensor(rng.normal(size=(1, 6, 3, 3)))
    probe = torch.as_tensor(rng.normal(size=(1, 6, 3, 3)))
    if (e := T.finite_diff_check(lambda v: (conv(v) * probe).sum(), x)) >= 1e-4:
        return f"masked conv input gradient error {e:.3g}"
    att = NonlocalAttention(2, 2, 1)
    y = torch.as_tensor(rng.random((1, 2, 3, 3)))
    probe = torch.as_tensor(rng.normal(size=(1, 6, 3, 3)))
    lw0 = att.proxy.log_w.detach().clone()
    f = lambda lw: (torch.func.functional_call(att, {"proxy.log_w": lw}, (y,)) * probe).sum()
    if (e := T.finite_diff_check(f, lw0)) >= 1e-4:
        return f"non-local gradient w.r.t. proxy weights error {e:.3g}"
    omega = Quantizer(1).centers().detach()[0]
    w0, mu0, s0 = torch.tensor([0.2, 0.5, 0.3], dtype=T.DTYPE), torch.tensor([0.3, 0.5, 0.7], dtype=T.DTYPE), torch.tensor([0.1, 0.2, 0.15], dtype=T.DTYPE)
    if (e := T.finite_diff_check(lambda m: discrete_prob(3, w0, m, s0, omega), mu0)) >= 1e-4:
        return f"mixture probability gradient error {e:.3g}"
    x = torch.as_tensor(rng.uniform(0.2, 0.8, size=(1, 3, 12, 12)))
    y0 = x + 0.05 * torch.as_tensor(rng.normal(size=x.shape))
    if (e := T.finite_diff_check(lambda v: ms_ssim(x, v).sum(), y0)) >= 1e-4:
        return f"MS-SSIM gradient error {e:.3g}"
    return None


def check_quantizer(rng):
    for _ in range(100):
        omega = torch.cumsum(torch.exp(torch.as_tensor(rng.normal(-2, 1, size=(2, 8)))), -1)
        if not (torch.diff(omega, dim=-1) > 0).all():
            return "centers are not strictly increasing"
        z = torch.as_tensor(rng.uniform(0, 2, size=(2, 3, 3)))
        idx, v = quantize(z, omega)
        if not torch.equal(quantize(v, omega)[0], idx):
            return "quantization is not idempotent"
    return None


CHECKS = (
    ("masks", check_masks),
    ("causality", check_causality),
    ("normalization", check_normalization),
    ("round-trip", check_round_trip),
    ("gradients", check_gradients),
    ("quantizer", check_quantizer),
)


def run_selftest(seed: int = 0, verbose: bool = False) -> list[tuple[str, str]]:
    """Run every check; returns ``(name, message)`` for each failure."""
    failures = []
    for name, fn in CHECKS:
        torch.manual_seed(seed)
        t0 = time.perf_counter()
        msg = fn(np.random.default_rng(seed))
        if verbose:
            print(f"{name:14s} {'ok' if msg is None else 'FAIL'} ({time.perf_counter() - t0:.1f}s)")
        if msg is not None:
            failures.append((name, msg))
    return failures
