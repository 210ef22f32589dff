"""Exact, invertible pixel-permutation transforms.

Every transform here is a permutation of pixel coordinates: no interpolation
happens, so images, integer label grids, point masks and probability maps are
all moved through the same code path.

Grids are indexed ``[row, col, ...]`` by default; the two spatial axes can be
moved with ``axes`` (e.g. ``axes=(-2, -1)`` for ``(N, C, H, W)`` torch tensors).
Both numpy arrays and torch tensors are accepted and the input type is kept.

Rotation convention (counter-clockwise)::

    rot90:  out[r, c] = in[c, W - 1 - r]
    hflip:  out[r, c] = in[r, W - 1 - c]
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from .errors import ContractError

try:
    import torch
except ImportError:  # pragma: no cover
    torch = None


class Transform(str, enum.Enum):
    IDENTITY = "identity"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"
    HFLIP = "hflip"

    def __str__(self):
        return self.value

    @property
    def quarter_turns(self):
        return _QUARTER_TURNS.get(self, 0)


_QUARTER_TURNS = {Transform.ROT90: 1, Transform.ROT180: 2, Transform.ROT270: 3}

_INVERSE = {
    Transform.IDENTITY: Transform.IDENTITY,
    Transform.ROT90: Transform.ROT270,
    Transform.ROT180: Transform.ROT180,
    Transform.ROT270: Transform.ROT90,
    Transform.HFLIP: Transform.HFLIP,
}

FAMILIES = {
    "flip": (Transform.HFLIP,),
    "fliprot": (
        Transform.IDENTITY,
        Transform.ROT90,
        Transform.ROT180,
        Transform.ROT270,
        Transform.HFLIP,
    ),
    "identity": (Transform.IDENTITY,),
}


def parse_transform(name) -> Transform:
    if isinstance(name, Transform):
        return name
    try:
        return Transform(str(name).lower())
    except ValueError:
        raise ContractError(f"unknown transform {name!r}") from None


def get_family(family) -> tuple[Transform, ...]:
    """Resolve a family name ("flip", "fliprot", "identity") or an iterable
    of transforms/names into a tuple of transforms."""
    if isinstance(family, str):
        try:
            members = FAMILIES[family.lower()]
        except KeyError:
            raise ContractError(f"unknown transform family {family!r}") from None
    else:
        members = tuple(parse_transform(t) for t in family)
    if not members:
        raise ContractError("transform family must be non-empty")
    return tuple(members)


def _is_torch(x):
    return torch is not None and isinstance(x, torch.Tensor)


def _normalize_axes(ndim, axes):
    if ndim < 2:
        raise ContractError(f"grid must have at least 2 dimensions, got {ndim}")
    ax = tuple(a % ndim for a in axes)
    if len(ax) != 2 or ax[0] == ax[1]:
        raise ContractError(f"axes must name two distinct dimensions, got {axes}")
    return ax


def apply_transform(t, grid, axes: Sequence[int] = (0, 1)):
    """Apply ``t`` to ``grid`` over the two spatial ``axes``.

    Non-square grids are fine; quarter turns swap the spatial extents.
    """
    t = parse_transform(t)
    ax = _normalize_axes(grid.ndim, axes)
    if _is_torch(grid):
        if t is Transform.HFLIP:
            return torch.flip(grid, dims=(ax[1],))
        if t is Transform.IDENTITY:
            return grid
        return torch.rot90(grid, t.quarter_turns, dims=ax)
    grid = np.asarray(grid)
    if t is Transform.HFLIP:
        return np.flip(grid, axis=ax[1])
    if t is Transform.IDENTITY:
        return grid
    return np.rot90(grid, t.quarter_turns, axes=ax)


def inverse_transform(t) -> Transform:
    return _INVERSE[parse_transform(t)]


def output_shape(t, H: int, W: int) -> tuple[int, int]:
    t = parse_transform(t)
    return (W, H) if t.quarter_turns % 2 else (H, W)


def sample_transform(rng: np.random.Generator, family) -> Transform:
    """Draw one member of ``family`` uniformly using ``rng``."""
    members = get_family(family)
    return members[int(rng.integers(len(members)))]


def transform_points(t, points, H: int, W: int):
    """Map ``(row, col, class_id)`` triples through ``t`` on an ``H x W`` grid.

    The mapping is the same bijection used by :func:`apply_transform`, so
    rasterizing the moved points equals transforming the rasterized mask.
    """
    t = parse_transform(t)
    out = []
    for p in points:
        r, c, k = int(p[0]), int(p[1]), p[2]
        if not (0 <= r < H and 0 <= c < W):
            raise ContractError(f"point ({r}, {c}) outside {H}x{W} grid")
        if t is Transform.IDENTITY:
            nr, nc = r, c
        elif t is Transform.HFLIP:
            nr, nc = r, W - 1 - c
        elif t is Transform.ROT90:
            nr, nc = W - 1 - c, r
        elif t is Transform.ROT180:
            nr, nc = H - 1 - r, W - 1 - c
        else:  # ROT270
            nr, nc = c, H - 1 - r
        out.append((nr, nc, k))
    return out
