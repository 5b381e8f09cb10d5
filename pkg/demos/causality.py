"""Which codes can a masked context model look at?

Run with ``python3 demos/causality.py``.
"""

import numpy as np
import torch

from nlcodec.ccn import INPUT, HIDDEN, build_mask, causality_probe, group_index, groups, num_groups
from nlcodec.entropy import EntropyConfig, PostEntropyModel
from nlcodec.quantizer import Quantizer, dequantize

np.set_printoptions(linewidth=120)
torch.manual_seed(0)

# A 3x4x4 code block splits into M+H+W-2 = 9 groups by r+p+q.
dims = (3, 4, 4)
print("groups:", num_groups(dims))
print("group index of channel 0:\n", group_index(dims)[0])
print("sizes:", [len(g) for g in groups(dims)])

# Input-layer mask for output channel 1 with a 5x5 window: a tap (s, u, v)
# is kept when s + u + v < 1.
m = build_mask(INPUT, 2, 3)
for s in range(3):
    print(f"input mask, r=1, s={s}\n", m[1, s].astype(int))

# Hidden layers also keep the current group, s + u + v <= r.
print("hidden mask, r=1, s=1\n", build_mask(HIDDEN, 2, 3)[1, 1].astype(int))

# A freshly initialized post model. Redrawing every code in groups >= k must
# leave the tables of groups <= k untouched.
cfg = EntropyConfig(channels=3, local_blocks=2, feature_blocks=2, res_blocks=1)
post = PostEntropyModel(cfg)
omega = Quantizer(3).centers().detach()


def tables(y):
    with torch.no_grad():
        return post(dequantize(torch.as_tensor(y)[None], omega))[0].numpy()


rng = np.random.default_rng(0)
y = rng.integers(0, 8, size=dims)
print("probe per group:", [causality_probe(tables, y, k, 8, rng) for k in range(num_groups(dims))])

# Now break one layer's mask and look again.
post.backbone.res[0].conv1.unmasked = True
print("probe with an unmasked layer:", max(causality_probe(tables, y, k, 8, rng) for k in range(num_groups(dims))))
