"""Non-local estimates on a block made of a few repeated code vectors.

Each position of the block below holds one of four random M-vectors. Once the
first r channels of a position are known, the earlier positions that agree on
those channels tell us channel r exactly, wherever they are in the plane. The
proxy distance measures that agreement.

Run with ``python3 demos/nonlocal_context.py``.
"""

import numpy as np
import torch

from nlcodec.nonlocal_block import ProxyWeights, nonlocal_context, nonlocal_weight_plane
from nlcodec.quantizer import Quantizer, dequantize
from nlcodec.synthetic import repeated_texture_codes

np.set_printoptions(precision=3, suppress=True, linewidth=120)
rng = np.random.default_rng(3)
m, h, w = 4, 8, 8
y_idx = repeated_texture_codes(rng, 1, (m, h, w))[0]
omega = Quantizer(m).centers().detach()
y = dequantize(torch.as_tensor(y_idx)[None], omega)

# Initial proxy weights are 1/(r+1). Scaling them up sharpens the softmin.
with torch.no_grad():
    wd = ProxyWeights(m)() * 200.0
out = nonlocal_context(y, wd)

r = 3
truth = y[0, r]
err = (out.rep[0, r] - truth).abs()
print("channel", r, "codes:\n", y_idx[r])
print("non-local estimate minus truth (rounded):\n", np.round(err.numpy(), 3))
print("confidence (lower is better):\n", np.round(out.conf[0, r].numpy(), 4))

# Where does position (6, 5) look?
plane = nonlocal_weight_plane(y[0], r, (6, 5), wd)
print("weights of position (6, 5):\n", np.round(plane.numpy(), 2))

# Channel 0 has no decoded prefix, so every earlier position counts equally.
print("channel 0 estimate error:", float((out.rep[0, 0] - y[0, 0]).abs()[out.valid[0, 0]].mean()))
print("channel 3 estimate error:", float(err[out.valid[0, r]].mean()))
