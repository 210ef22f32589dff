"""Point annotations derived from segmentation masks.

Each connected foreground region contributes the pixel deepest inside it
(largest Euclidean distance to the region boundary), and the same number of
background pixels is drawn uniformly at random.  Synthetic ellipse slices are
generated here too, as a stand-in for real CT data at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .geometry import transform_points

UNLABELED = -1
BACKGROUND = 0
INFECTED = 1


@dataclass
class PointAnnotation:
    """Labeled pixels as ``(row, col, class_id)`` triples."""

    points: list = field(default_factory=list)

    def __len__(self):
        return len(self.points)

    @property
    def n_foreground(self):
        return sum(1 for p in self.points if p[2] != BACKGROUND)

    @property
    def n_background(self):
        return sum(1 for p in self.points if p[2] == BACKGROUND)

    def transformed(self, t, H, W):
        return PointAnnotation(transform_points(t, self.points, H, W))

    def to_dict(self):
        return {
            "points": [
                {"row": int(r), "col": int(c), "class_id": int(k)}
                for r, c, k in self.points
            ]
        }

    @classmethod
    def from_dict(cls, d):
        return cls([(int(p["row"]), int(p["col"]), int(p["class_id"])) for p in d["points"]])

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class RegionLabeling:
    label_grid: np.ndarray
    count: int


def _structure(connectivity):
    if connectivity == 8:
        return np.ones((3, 3), dtype=bool)
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    raise ContractError(f"connectivity must be 4 or 8, got {connectivity}")


def _as_binary(mask, name="mask"):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {mask.shape}")
    if mask.dtype != bool:
        if not np.isin(mask, (0, 1)).all():
            raise ContractError(f"{name} must be binary (values in {{0, 1}})")
        mask = mask.astype(bool)
    return mask


def connected_regions(binary, connectivity: int = 8) -> RegionLabeling:
    binary = _as_binary(binary, "binary")
    labels, count = ndimage.label(binary, structure=_structure(connectivity))
    return RegionLabeling(labels.astype(np.int32), int(count))


def region_centers(binary, connectivity: int = 8):
    """One ``(row, col)`` per connected region: the argmax of the Euclidean
    distance transform, ties going to the smallest row then column.

    Pixels outside the grid count as background.
    """
    lab = connected_regions(binary, connectivity)
    centers = []
    for k, sl in enumerate(ndimage.find_objects(lab.label_grid), start=1):
        if sl is None:
            continue
        crop = np.pad(lab.label_grid[sl] == k, 1)
        dist = ndimage.distance_transform_edt(crop)
        r, c = np.unravel_index(int(np.argmax(dist)), dist.shape)
        centers.append((int(r) - 1 + sl[0].start, int(c) - 1 + sl[1].start))
    return centers


def points_from_mask(mask, rng: np.random.Generator, connectivity: int = 8) -> PointAnnotation:
    """Build the point annotation for one full mask.

    Foreground points come first in region order (raster order of each
    region's first pixel), then background points in raster order.
    """
    mask = _as_binary(mask)
    fg = [(r, c, INFECTED) for r, c in region_centers(mask, connectivity)]
    if not fg:
        return PointAnnotation([])
    bg_idx = np.flatnonzero(~mask.ravel())
    if bg_idx.size < len(fg):
        raise ContractError(
            f"cannot sample {len(fg)} background points from {bg_idx.size} background pixels"
        )
    picked = np.sort(rng.choice(bg_idx, size=len(fg), replace=False))
    W = mask.shape[1]
    bg = [(int(i) // W, int(i) % W, BACKGROUND) for i in picked]
    return PointAnnotation(fg + bg)


def rasterize_points(ann, H: int, W: int) -> np.ndarray:
    """Point mask: ``UNLABELED`` everywhere except annotated pixels."""
    points = ann.points if isinstance(ann, PointAnnotation) else ann
    grid = np.full((H, W), UNLABELED, dtype=np.int8)
    for r, c, k in points:
        if not (0 <= r < H and 0 <= c < W):
            raise ContractError(f"point ({r}, {c}) outside {H}x{W} grid")
        if grid[r, c] != UNLABELED:
            raise ContractError(f"duplicate annotation at pixel ({r}, {c})")
        grid[r, c] = k
    return grid


@dataclass
class SynthConfig:
    H: int = 64
    W: int = 64
    n_regions_range: tuple = (1, 3)
    radius_range: tuple = (3, 8)
    intensity: float = 0.5
    noise_level: float = 0.1
    background: float = 0.2
    min_gap: int = 2
    max_tries: int = 200


def synth_slice(rng: np.random.Generator, cfg: SynthConfig | None = None):
    """Draw one synthetic slice with filled ellipses on a noisy background.

    Returns ``(image, mask)`` where ``image`` is float64 and ``mask`` uint8.
    Ellipses never touch each other (``min_gap`` pixels apart), so every
    ellipse is its own connected region.
    """
    cfg = cfg or SynthConfig()
    n_lo, n_hi = cfg.n_regions_range
    r_lo, r_hi = cfg.radius_range
    if n_lo < 0 or n_hi < n_lo or r_lo < 1 or r_hi < r_lo:
        raise ContractError(f"degenerate synth ranges: regions={cfg.n_regions_range}, radius={cfg.radius_range}")
    if 2 * r_hi + 1 > min(cfg.H, cfg.W):
        raise ContractError(f"radius {r_hi} does not fit a {cfg.H}x{cfg.W} canvas")

    rr, cc = np.mgrid[: cfg.H, : cfg.W]
    n = int(rng.integers(n_lo, n_hi + 1))
    mask = np.zeros((cfg.H, cfg.W), dtype=bool)
    # grown copy of the mask used to enforce the gap between ellipses
    forbidden = np.zeros_like(mask)
    placed = 0
    tries = 0
    while placed < n:
        tries += 1
        if tries > cfg.max_tries:
            raise ContractError(f"could not place {n} disjoint regions after {cfg.max_tries} tries")
        a, b = rng.uniform(r_lo, r_hi, size=2)
        theta = rng.uniform(0, np.pi)
        rmax = int(np.ceil(max(a, b)))
        r0 = rng.uniform(rmax, cfg.H - 1 - rmax)
        c0 = rng.uniform(rmax, cfg.W - 1 - rmax)
        dr, dc = rr - r0, cc - c0
        u = dr * np.cos(theta) + dc * np.sin(theta)
        v = -dr * np.sin(theta) + dc * np.cos(theta)
        ell = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        if not ell.any() or (ell & forbidden).any():
            continue
        mask |= ell
        forbidden = ndimage.binary_dilation(mask, np.ones((3, 3), bool), iterations=cfg.min_gap)
        placed += 1

    image = cfg.background + cfg.intensity * mask + cfg.noise_level * rng.standard_normal(mask.shape)
    return image, mask.astype(np.uint8)
