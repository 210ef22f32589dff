"""
Transforms and point labels
===========================

Every transform is a pixel permutation, so images, label grids and point
annotations all move together.  This script builds one synthetic slice,
derives its point labels and checks that rotating the labels agrees with
labelling the rotated mask.
"""

import numpy as np

from ptseg.annotations import SynthConfig, points_from_mask, rasterize_points, synth_slice
from ptseg.geometry import FAMILIES, apply_transform, transform_points

rng = np.random.default_rng(0)
image, mask = synth_slice(rng, SynthConfig(H=32, W=40, radius_range=(2, 6)))
print("image", image.shape, "regions marked:", int(mask.sum()), "pixels")

# one point at the deepest pixel of each region, plus as many background points
ann = points_from_mask(mask, np.random.default_rng(1))
print("foreground points:", ann.n_foreground, "background points:", ann.n_background)
for r, c, k in ann.points:
    print(f"  ({r:2d}, {c:2d}) class {k}")

# the point mask is what the point loss sees: -1 everywhere except the points
pmask = rasterize_points(ann, *mask.shape)
H, W = mask.shape
for t in FAMILIES["fliprot"]:
    moved = apply_transform(t, pmask)
    # transforming the point list gives the same grid as transforming the grid
    pts = transform_points(t, ann.points, H, W)
    same = all(moved[r, c] == k for r, c, k in pts)
    print(f"{t!s:8s} shape {moved.shape}  points agree: {same}")
