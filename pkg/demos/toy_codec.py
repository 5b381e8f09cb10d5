"""Train a tiny codec on synthetic images, then encode and decode one.

This takes a few minutes on one core. The numbers are far from a real codec;
the point is to walk through the pipeline.

Run with ``python3 demos/toy_codec.py``.
"""

import time

import numpy as np
import torch

from nlcodec.metrics import bpp, psnr
from nlcodec.model import Codec, CodecConfig
from nlcodec.synthetic import synthetic_images
from nlcodec.training import TrainConfig, extract_codes, train, train_post, warm_start_post

torch.manual_seed(0)
rng = np.random.default_rng(0)
images = list(synthetic_images(rng, 64, 64))

model = Codec(CodecConfig.build(width=16, latent_channels=8, local_blocks=2, feature_blocks=2, res_blocks=1))
cfg = TrainConfig(lam=0.01, patch_size=64, batch_size=4, warmup_steps=200, lr_levels=(1e-3, 1e-4))

t0 = time.time()
hist = train(model, images, cfg, steps=600)
print(f"joint training: {time.time() - t0:.0f}s")
for step in (0, 199, 200, 599):
    h = hist[step]
    print(f"  step {step:3d}  mse {h.distortion:.4f}  rate {h.rate:.3f} bits/code")

# The coder uses the post model, fitted on the codes the trained transform
# produces. With this little data it memorizes quickly, so it starts from the
# mixture model's backbone, sees every flip and quarter turn of each image, and
# keeps the checkpoint that does best on a few held-out images.
blocks = extract_codes(model, images[8:], crop=None, augment=True)
held = extract_codes(model, images[:8], crop=None)
warm_start_post(model.post, model.entropy)
rep = train_post(
    model.post, model.quantizer.centers(), blocks, steps=300, lr=1e-3, eval_every=50, heldout_blocks=held
)
model.invalidate_hash()
print(f"post model: {rep.train_bits:.3f} bits/code train, {rep.heldout_bits:.3f} held out")

# a fresh 64x64 image: the size the transforms were trained on
x = synthetic_images(np.random.default_rng(1), 1, 64)[0]
stream = model.compress(x)
x_hat = model.decompress(stream)
print(f"{len(stream)} bytes, {bpp(stream, x.shape[1:]):.3f} bpp, PSNR {psnr(x, x_hat):.2f} dB")
print("header:", stream[:20].hex())
