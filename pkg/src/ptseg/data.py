"""Ingestion, preprocessing, split construction and on-disk formats.

Manifest (JSON, paths relative to the manifest's directory)::

    {"scans": [{"scan_id": "scan_000",
                "slices": ["scan_000/slice_0000.png", ...],   # axial order
                "masks":  ["scan_000/mask_0000.png", ...] | null,
                "hu": false}]}

Slice files are 8-bit grayscale PNG or ``.npy``.  With ``"hu": true`` the
slices hold raw Hounsfield units and are windowed to 8 bits on load.  Mask
PNGs store foreground as any non-zero value.

Raw volume (``.ctv``)::

    bytes 0-7    magic b"CTVOL\\x00\\x00\\x01"
    bytes 8-19   uint32 LE: n_slices, H, W
    bytes 20-    int16 LE payload, C order (slice, row, col)
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .annotations import PointAnnotation, SynthConfig, points_from_mask, rasterize_points, synth_slice
from .errors import ContractError, FormatError

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
DEFAULT_HU_WINDOW = (-1000, 400)

CTV_MAGIC = b"CTVOL\x00\x00\x01"
_CTV_HEADER = struct.Struct("<III")

SCAN_SPLIT_PRESETS = {"B": (5, 1, 3), "C": (15, 1, 4)}
_PRESET_BY_SCAN_COUNT = {9: "B", 20: "C"}

SUBSETS = ("train", "val", "test")


# -- pixel preprocessing ---------------------------------------------------

def hu_window_to_u8(raw, window=DEFAULT_HU_WINDOW) -> np.ndarray:
    low, high = window
    if not low < high:
        raise ContractError(f"HU window needs low < high, got {window}")
    x = np.clip(np.asarray(raw, dtype=np.float64), low, high)
    x = (x - low) * 255.0 / (high - low)
    return np.floor(x + 0.5).astype(np.uint8)


def resize_image(img, target: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.shape == (target, target):
        return img.copy()
    return np.asarray(Image.fromarray(img, mode="F").resize((target, target), Image.BILINEAR))


def resize_mask(mask, target: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.uint8)
    if mask.shape == (target, target):
        return mask.copy()
    return np.asarray(Image.fromarray(mask).resize((target, target), Image.NEAREST))


def preprocess_slice(u8, target: int = 352, stats=(IMAGENET_MEAN, IMAGENET_STD), factor: int = 1) -> np.ndarray:
    """Resize to ``target x target``, scale to [0, 1], replicate to the number
    of channels in ``stats`` and standardize. Returns float32 ``(H, W, ch)``."""
    if target <= 0 or target % factor:
        raise ContractError(f"target size {target} must be a positive multiple of {factor}")
    x = resize_image(u8, target) / np.float32(255.0)
    mean = np.asarray(stats[0], dtype=np.float32)
    std = np.asarray(stats[1], dtype=np.float32)
    x = np.repeat(x[..., None], mean.size, axis=-1)
    return ((x - mean) / std).astype(np.float32)


# -- raw volumes -------------------------------------------------------------

def save_volume(path, volume):
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ContractError(f"volume must be 3-D, got shape {vol.shape}")
    with open(path, "wb") as f:
        f.write(CTV_MAGIC)
        f.write(_CTV_HEADER.pack(*vol.shape))
        f.write(vol.astype("<i2").tobytes())


def load_volume(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[: len(CTV_MAGIC)] != CTV_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:8]!r}", offset=0)
    hdr_end = len(CTV_MAGIC) + _CTV_HEADER.size
    if len(data) < hdr_end:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    dims = _CTV_HEADER.unpack_from(data, len(CTV_MAGIC))
    expected = 2 * int(np.prod(dims, dtype=np.int64))
    payload = len(data) - hdr_end
    if payload != expected:
        raise FormatError(
            f"{path}: header dims {dims} need {expected} payload bytes, found {payload}",
            offset=hdr_end + min(payload, expected),
        )
    return np.frombuffer(data, dtype="<i2", offset=hdr_end).reshape(dims).astype(np.int16)


# -- manifest ----------------------------------------------------------------

@dataclass
class ScanEntry:
    scan_id: str
    slices: list
    masks: list | None = None
    hu: bool = False

    def __post_init__(self):
        if self.masks is not None and len(self.masks) != len(self.slices):
            raise ContractError(
                f"scan {self.scan_id}: {len(self.slices)} slices but {len(self.masks)} masks"
            )


@dataclass
class VolumeManifest:
    scans: list = field(default_factory=list)
    root: Path = Path(".")

    @property
    def n_slices(self):
        return sum(len(s.slices) for s in self.scans)

    def keys(self):
        """All ``(scan_id, slice_index)`` pairs in manifest order."""
        return [(s.scan_id, i) for s in self.scans for i in range(len(s.slices))]

    def scan(self, scan_id) -> ScanEntry:
        for s in self.scans:
            if s.scan_id == scan_id:
                return s
        raise KeyError(scan_id)

    def to_dict(self):
        return {
            "scans": [
                {"scan_id": s.scan_id, "slices": list(s.slices), "masks": None if s.masks is None else list(s.masks), "hu": bool(s.hu)}
                for s in self.scans
            ]
        }

    def save(self, path):
        path = Path(path)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)
            f.write("\n")
        self.root = path.parent

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path) as f:
            d = json.load(f)
        scans = [ScanEntry(s["scan_id"], list(s["slices"]), s.get("masks"), bool(s.get("hu", False))) for s in d["scans"]]
        ids = [s.scan_id for s in scans]
        if len(set(ids)) != len(ids):
            raise ContractError(f"{path}: duplicate scan ids")
        return cls(scans, path.parent)


def read_grid(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def write_png(path, u8):
    Image.fromarray(np.asarray(u8, dtype=np.uint8), mode="L").save(path, format="PNG")


# -- splits ------------------------------------------------------------------

@dataclass
class SplitSpec:
    mode: str
    assignments: dict  # (scan_id, slice_index) -> subset

    def keys(self, subset):
        return [k for k, v in self.assignments.items() if v == subset]

    def counts(self):
        return {s: len(self.keys(s)) for s in SUBSETS}


def build_split(manifest: VolumeManifest, mode: str = "mixed", fractions=(0.45, 0.05), scan_split=None) -> SplitSpec:
    """Assign every slice to train/val/test.

    ``mixed``: per scan, the first ``floor(f_train * n)`` slices train, the
    next ``floor(f_val * n)`` validate, the rest test.

    ``separate``: whole scans in manifest order; ``scan_split`` is a preset
    name ("B", "C") or ``(n_train, n_val, n_test)``.  When omitted, 9-scan
    and 20-scan manifests use presets B and C.
    """
    assignments = {}
    if mode == "mixed":
        f_train, f_val = (Fraction(str(f)) for f in fractions)
        if f_train < 0 or f_val < 0 or f_train + f_val > 1:
            raise ContractError(f"invalid split fractions {fractions}")
        for s in manifest.scans:
            n = len(s.slices)
            n_train = int(f_train * n)
            n_val = int(f_val * n)
            for i in range(n):
                sub = "train" if i < n_train else "val" if i < n_train + n_val else "test"
                assignments[(s.scan_id, i)] = sub
    elif mode == "separate":
        if scan_split is None:
            preset = _PRESET_BY_SCAN_COUNT.get(len(manifest.scans))
            if preset is None:
                raise ContractError(
                    f"no default scan split for {len(manifest.scans)} scans; pass scan_split"
                )
            scan_split = preset
        if isinstance(scan_split, str):
            try:
                scan_split = SCAN_SPLIT_PRESETS[scan_split.upper()]
            except KeyError:
                raise ContractError(f"unknown scan split preset {scan_split!r}") from None
        n_train, n_val, n_test = (int(v) for v in scan_split)
        need = n_train + n_val + n_test
        if len(manifest.scans) < need:
            raise ContractError(f"scan split {scan_split} needs {need} scans, manifest has {len(manifest.scans)}")
        for j, s in enumerate(manifest.scans):
            # scans past the requested counts join the test set
            sub = "train" if j < n_train else "val" if j < n_train + n_val else "test"
            for i in range(len(s.slices)):
                assignments[(s.scan_id, i)] = sub
    else:
        raise ContractError(f"unknown split mode {mode!r}")
    return SplitSpec(mode, assignments)


# -- slices ------------------------------------------------------------------

@dataclass
class Slice:
    image: np.ndarray  # (H, W, ch) float32, preprocessed
    full_mask: np.ndarray | None = None  # (H, W) uint8 in {0, 1}
    points: PointAnnotation | None = None
    scan_id: str = ""
    slice_index: int = 0

    @property
    def shape(self):
        return self.image.shape[:2]

    @property
    def point_mask(self):
        if self.points is None:
            return None
        return rasterize_points(self.points, *self.shape)

    @property
    def background_only(self):
        """No annotated region: the point loss treats every pixel as background."""
        return self.points is not None and self.points.n_foreground == 0


def slice_rng(seed: int, scan_pos: int, slice_index: int) -> np.random.Generator:
    """Per-slice generator for background point sampling."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(scan_pos), int(slice_index)]))


def points_path(points_dir, scan_id, slice_index) -> Path:
    return Path(points_dir) / scan_id / f"points_{slice_index:04d}.json"


def load_raw_slice(manifest: VolumeManifest, scan: ScanEntry, i: int, hu_window=DEFAULT_HU_WINDOW):
    """Return ``(u8 image, mask or None)`` at native resolution."""
    raw = read_grid(manifest.root / scan.slices[i])
    if scan.hu:
        u8 = hu_window_to_u8(raw, hu_window)
    else:
        u8 = np.clip(raw, 0, 255).astype(np.uint8)
    mask = None
    if scan.masks is not None:
        mask = (read_grid(manifest.root / scan.masks[i]) > 0).astype(np.uint8)
    return u8, mask


def make_slice(u8, mask, target, stats, factor=1, points=None, seed=0, scan_id="", scan_pos=0, slice_index=0):
    """Preprocess one slice and attach point labels.

    Points come from ``points`` when given, else are derived from the
    resized mask with a generator keyed on ``(seed, scan_pos, slice_index)``.
    """
    image = preprocess_slice(u8, target, stats, factor)
    full = resize_mask(mask, target) if mask is not None else None
    if points is None and full is not None:
        points = points_from_mask(full, slice_rng(seed, scan_pos, slice_index))
    return Slice(image, full, points, scan_id, slice_index)


def load_slices(
    manifest: VolumeManifest,
    keys,
    target: int,
    stats=(IMAGENET_MEAN, IMAGENET_STD),
    hu_window=DEFAULT_HU_WINDOW,
    factor: int = 1,
    points_dir=None,
    seed: int = 0,
):
    """Load and preprocess the slices named by ``keys`` in the given order."""
    positions = {s.scan_id: j for j, s in enumerate(manifest.scans)}
    out = []
    for scan_id, i in keys:
        scan = manifest.scan(scan_id)
        u8, mask = load_raw_slice(manifest, scan, i, hu_window)
        points = None
        if points_dir is not None:
            p = points_path(points_dir, scan_id, i)
            if p.exists():
                points = PointAnnotation.load(p)
        out.append(make_slice(u8, mask, target, stats, factor, points, seed, scan_id, positions[scan_id], i))
    return out


def synth_to_u8(image) -> np.ndarray:
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def synth_raw(n: int, seed: int, cfg: SynthConfig | None = None):
    """``n`` synthetic ``(u8 image, mask)`` pairs from one seeded stream."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        img, mask = synth_slice(rng, cfg)
        out.append((synth_to_u8(img), mask))
    return out


def write_synthetic_dataset(out_dir, n: int, seed: int = 0, size: int = 64, n_scans: int = 1, cfg: SynthConfig | None = None):
    """Write ``n`` synthetic slices as PNGs plus ``manifest.json``.

    Slices are dealt to ``n_scans`` scans in contiguous runs.  Without an
    explicit ``cfg`` the default region radii are scaled to ``size``.
    """
    if cfg is None:
        cfg = SynthConfig()
        scale = size / cfg.H
        cfg.radius_range = tuple(max(1, round(r * scale)) for r in cfg.radius_range)
    cfg = SynthConfig(**{**cfg.__dict__, "H": size, "W": size})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if n == 0:
        log.warning("writing an empty synthetic dataset")
    pairs = synth_raw(n, seed, cfg)
    n_scans = max(1, min(n_scans, n)) if n else 0
    bounds = np.linspace(0, n, n_scans + 1).astype(int) if n_scans else [0]
    scans = []
    for j in range(n_scans):
        scan_id = f"scan_{j:03d}"
        os.makedirs(out_dir / scan_id, exist_ok=True)
        slices, masks = [], []
        for k, idx in enumerate(range(bounds[j], bounds[j + 1])):
            img, mask = pairs[idx]
            s_rel = f"{scan_id}/slice_{k:04d}.png"
            m_rel = f"{scan_id}/mask_{k:04d}.png"
            write_png(out_dir / s_rel, img)
            write_png(out_dir / m_rel, mask * 255)
            slices.append(s_rel)
            masks.append(m_rel)
        scans.append(ScanEntry(scan_id, slices, masks, False))
    manifest = VolumeManifest(scans, out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
