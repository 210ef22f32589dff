"""
Point loss and consistency loss
===============================

The point loss only looks at annotated pixels.  The consistency loss
compares the prediction on a transformed image with the transformed
prediction on the original; it is zero for a network that commutes with
the transform.
"""

import numpy as np
import torch

from ptseg.annotations import points_from_mask, rasterize_points, synth_slice, SynthConfig
from ptseg.geometry import Transform, apply_transform
from ptseg.losses import LossConfig, cb_total_loss, consistency_loss, point_loss
from ptseg.model import NetConfig, build_network, forward, softmax_probs

rng = np.random.default_rng(3)
image, mask = synth_slice(rng, SynthConfig(H=32, W=32, radius_range=(2, 6)))
pmask = rasterize_points(points_from_mask(mask, rng), 32, 32)
x = image.astype(np.float32)

t = Transform.ROT90

# a 1x1-conv network treats every pixel alike, so it commutes with rotation
pointwise = build_network(NetConfig(arch="pointwise", channels=(8,)), seed=0)
# the U-Net does not, at least not before training
unet = build_network(NetConfig(channels=(8, 16)), seed=0)

for name, net in [("pointwise", pointwise), ("unet", unet)]:
    with torch.no_grad():
        p_x = softmax_probs(forward(net, x))
        p_tx = softmax_probs(forward(net, apply_transform(t, x)))
    print(f"{name:9s} point loss {float(point_loss(p_x, pmask)):8.4f}  "
          f"consistency ({t}) {float(consistency_loss(p_x, p_tx, t)):.2e}")

# the full objective for one image: point loss on both branches plus the L1 term
with torch.no_grad():
    p_x = softmax_probs(forward(unet, x))
    p_tx = softmax_probs(forward(unet, apply_transform(t, x)))
for lam in (0.0, 1.0, 10.0):
    total = cb_total_loss(p_x, p_tx, pmask, t, LossConfig(lambda_weight=lam))
    print(f"lambda {lam:4.1f}: total {float(total):.4f}")
