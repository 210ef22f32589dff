import json

import numpy as np
import pytest

from conftest import flood_fill_count
from ptseg.annotations import (
    UNLABELED,
    PointAnnotation,
    SynthConfig,
    connected_regions,
    points_from_mask,
    rasterize_points,
    region_centers,
    synth_slice,
)
from ptseg.errors import ContractError
from ptseg.geometry import apply_transform


def square_mask():
    m = np.zeros((9, 9), dtype=np.uint8)
    m[2:7, 2:7] = 1
    return m


def test_single_square_center(rng):
    ann = points_from_mask(square_mask(), rng)
    fg = [p for p in ann.points if p[2] == 1]
    assert fg == [(4, 4, 1)]
    assert ann.n_background == 1


def test_two_regions(rng):
    m = np.zeros((10, 10), dtype=np.uint8)
    m[1:3, 1:3] = 1
    m[6:9, 5:9] = 1
    ann = points_from_mask(m, rng)
    _, labels = flood_fill_count(m)
    fg = [p for p in ann.points if p[2] == 1]
    bg = [p for p in ann.points if p[2] == 0]
    assert len(fg) == 2 and len(bg) == 2
    assert len({labels[r, c] for r, c, _ in fg}) == 2
    assert all(labels[r, c] > 0 for r, c, _ in fg)
    assert all(m[r, c] == 0 for r, c, _ in bg)


def test_empty_mask(rng):
    assert points_from_mask(np.zeros((5, 5)), rng).points == []


def test_not_enough_background(rng):
    m = np.ones((3, 3), dtype=np.uint8)
    m[1, 1] = 0  # a ring around one background pixel: exactly enough
    assert len(points_from_mask(m, rng)) == 2
    m2 = np.ones((3, 3), dtype=np.uint8)
    with pytest.raises(ContractError):
        points_from_mask(m2, rng)


def test_non_binary_rejected(rng):
    with pytest.raises(ContractError):
        points_from_mask(np.full((3, 3), 2), rng)


def test_tie_break_row_major():
    # 2x4 bar: the distance map has a plateau along the bar; smallest (row, col) wins
    m = np.zeros((6, 8), dtype=np.uint8)
    m[2:4, 1:7] = 1
    assert region_centers(m) == [(2, 1)]


def test_centers_mirror_under_hflip():
    m = np.zeros((9, 11), dtype=np.uint8)
    m[2:7, 1:6] = 1  # 5x5 square, unique center
    (r, c), = region_centers(m)
    (r2, c2), = region_centers(apply_transform("hflip", m))
    assert (r2, c2) == (r, 10 - c)


def test_point_determinism():
    m = square_mask()
    a = points_from_mask(m, np.random.default_rng(5))
    b = points_from_mask(m, np.random.default_rng(5))
    assert a == b


@pytest.mark.parametrize("seed", range(25))
def test_point_count_matches_regions(seed):
    rng = np.random.default_rng(seed)
    m = (rng.random((16, 16)) < 0.25).astype(np.uint8)
    ann = points_from_mask(m, rng)
    n_regions, labels = flood_fill_count(m, 8)
    fg = [p for p in ann.points if p[2] == 1]
    assert len(fg) == n_regions == connected_regions(m, 8).count
    assert sorted(labels[r, c] for r, c, _ in fg) == list(range(1, n_regions + 1))
    assert ann.n_background == (n_regions if n_regions else 0)
    assert len({(r, c) for r, c, _ in ann.points}) == len(ann.points)


def test_rasterize():
    assert (rasterize_points(PointAnnotation([]), 3, 3) == UNLABELED).all()
    g = rasterize_points(PointAnnotation([(1, 2, 1)]), 4, 4)
    assert (g != UNLABELED).sum() == 1 and g[1, 2] == 1
    with pytest.raises(ContractError):
        rasterize_points([(0, 0, 1), (0, 0, 0)], 2, 2)
    with pytest.raises(ContractError):
        rasterize_points([(2, 0, 1)], 2, 2)


def test_connected_regions_examples():
    assert connected_regions(np.zeros((4, 4))).count == 0
    assert connected_regions(np.ones((4, 4))).count == 1
    diag = np.array([[1, 0], [0, 1]])
    assert connected_regions(diag, 8).count == flood_fill_count(diag, 8)[0] == 1
    assert connected_regions(diag, 4).count == flood_fill_count(diag, 4)[0] == 2


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("conn", [4, 8])
def test_connected_regions_vs_flood_fill(seed, conn):
    m = (np.random.default_rng(seed).random((12, 12)) < 0.4).astype(np.uint8)
    lab = connected_regions(m, conn)
    n, ref = flood_fill_count(m, conn)
    assert lab.count == n
    # same partition up to relabeling
    pairs = {(a, b) for a, b in zip(lab.label_grid.ravel(), ref.ravel())}
    assert len(pairs) == n + (1 if (m == 0).any() else 0)
    assert sorted(np.unique(lab.label_grid[m > 0])) == list(range(1, n + 1))


def test_json_round_trip(tmp_path):
    ann = PointAnnotation([(1, 2, 1), (3, 4, 0)])
    ann.save(tmp_path / "p.json")
    d = json.loads((tmp_path / "p.json").read_text())
    assert d == {"points": [{"row": 1, "col": 2, "class_id": 1}, {"row": 3, "col": 4, "class_id": 0}]}
    assert PointAnnotation.load(tmp_path / "p.json") == ann


def test_synth_no_regions():
    img, mask = synth_slice(np.random.default_rng(0), SynthConfig(n_regions_range=(0, 0)))
    assert mask.sum() == 0 and img.shape == (64, 64)


def test_synth_deterministic():
    a = synth_slice(np.random.default_rng(9))
    b = synth_slice(np.random.default_rng(9))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_synth_foreground_fraction():
    rng = np.random.default_rng(0)
    cfg = SynthConfig(radius_range=(3, 6))
    for _ in range(100):
        _, mask = synth_slice(rng, cfg)
        assert 0 < mask.mean() < 0.5


def test_synth_regions_are_separate():
    rng = np.random.default_rng(1)
    cfg = SynthConfig(n_regions_range=(3, 3))
    for _ in range(20):
        _, mask = synth_slice(rng, cfg)
        assert connected_regions(mask, 8).count == 3


def test_synth_infeasible():
    with pytest.raises(ContractError):
        synth_slice(np.random.default_rng(0), SynthConfig(H=16, W=16, n_regions_range=(30, 30), radius_range=(3, 4)))
    with pytest.raises(ContractError):
        synth_slice(np.random.default_rng(0), SynthConfig(H=8, W=8, radius_range=(5, 6)))
