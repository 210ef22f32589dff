"""Segmentation networks and their checkpoint format.

Networks take ``(N, ch, H, W)`` tensors and return ``(N, C, H, W)`` logits.
The single-image helpers (:func:`forward`, :func:`softmax_probs`,
:func:`predict_labels`) work channel-last, ``(H, W, C)``, like the rest of
the package.

Checkpoints are safetensors files.  Tensor names are the network's
``state_dict`` keys; the header metadata has a single key, ``"ptseg"``,
whose value is a sorted-key JSON object::

    format   "ptseg-checkpoint/1"
    config   {"net": NetConfig fields, ...caller extras}
    step     optimizer steps taken when the weights were saved

(One key only: safetensors does not keep metadata key order, and saves
must be byte-reproducible.)
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.numpy import load_file, save_file
from safetensors import safe_open

from .errors import ContractError, FormatError

CHECKPOINT_FORMAT = "ptseg-checkpoint/1"


@dataclass
class NetConfig:
    arch: str = "unet"  # "unet", "pointwise" or "fcn8"
    channels: tuple = (8, 16, 24, 40)
    in_channels: int = 3
    n_classes: int = 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.arch not in ("unet", "pointwise", "fcn8"):
            raise ContractError(f"unknown arch {self.arch!r}")
        if self.arch == "unet" and not self.channels:
            raise ContractError("unet needs at least one channel width")


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class UNet(nn.Module):
    """Encoder of stride-2 blocks, bilinear decoder with skip connections.

    ``channels[0]`` is the full-resolution width; every further entry adds
    one stride-2 stage.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        ch = cfg.channels
        self.stem = _conv(cfg.in_channels, ch[0])
        self.down = nn.ModuleList(
            nn.Sequential(_conv(a, b, stride=2), nn.ReLU(), _conv(b, b), nn.ReLU())
            for a, b in zip(ch[:-1], ch[1:])
        )
        self.up = nn.ModuleList(
            nn.Sequential(_conv(b + a, a), nn.ReLU())
            for a, b in zip(ch[:-1], ch[1:])
        )
        self.head = nn.Conv2d(ch[0], cfg.n_classes, 1)
        self.factor = 2 ** (len(ch) - 1)

    def forward(self, x):
        x = F.relu(self.stem(x))
        skips = []
        for block in self.down:
            skips.append(x)
            x = block(x)
        for block, skip in zip(reversed(self.up), reversed(skips)):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)


class Pointwise(nn.Module):
    """1x1 convolutions only: every output pixel sees just its input pixel."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        layers = []
        cin = cfg.in_channels
        for c in cfg.channels:
            layers += [nn.Conv2d(cin, c, 1), nn.ReLU()]
            cin = c
        layers.append(nn.Conv2d(cin, cfg.n_classes, 1))
        self.body = nn.Sequential(*layers)
        self.factor = 1

    def forward(self, x):
        return self.body(x)


class FCN8(nn.Module):
    """VGG16 backbone with FCN-8s score fusion.

    Weights start random; load ImageNet weights yourself with
    ``net.backbone.load_state_dict`` if you have them.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        from torchvision.models import vgg16

        if cfg.in_channels != 3:
            raise ContractError("fcn8 expects 3 input channels")
        self.backbone = vgg16(weights=None).features
        self.fc = nn.Sequential(
            nn.Conv2d(512, 1024, 7, padding=3), nn.ReLU(),
            nn.Conv2d(1024, 1024, 1), nn.ReLU(),
        )
        self.score_fc = nn.Conv2d(1024, cfg.n_classes, 1)
        self.score_pool4 = nn.Conv2d(512, cfg.n_classes, 1)
        self.score_pool3 = nn.Conv2d(256, cfg.n_classes, 1)
        self.factor = 32

    def forward(self, x):
        size = x.shape[-2:]
        feats = {}
        for i, layer in enumerate(self.backbone):
            x = layer(x)
            if i == 16:
                feats["pool3"] = x
            elif i == 23:
                feats["pool4"] = x
        s = self.score_fc(self.fc(x))
        s = F.interpolate(s, size=feats["pool4"].shape[-2:], mode="bilinear", align_corners=False)
        s = s + self.score_pool4(feats["pool4"])
        s = F.interpolate(s, size=feats["pool3"].shape[-2:], mode="bilinear", align_corners=False)
        s = s + self.score_pool3(feats["pool3"])
        return F.interpolate(s, size=size, mode="bilinear", align_corners=False)


_ARCHS = {"unet": UNet, "pointwise": Pointwise, "fcn8": FCN8}


def build_network(cfg: NetConfig | None = None, seed: int = 0) -> nn.Module:
    """Instantiate ``cfg`` with weights drawn from a private generator.

    Equal ``(cfg, seed)`` always yields bit-identical parameters.
    """
    cfg = cfg or NetConfig()
    net = _ARCHS[cfg.arch](cfg)
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=g)
                nn.init.zeros_(m.bias)
    net.config = cfg
    return net


def n_parameters(net) -> int:
    return sum(p.numel() for p in net.parameters())


def check_divisible(net, H, W):
    factor = getattr(net, "factor", 1)
    if H % factor or W % factor:
        raise ContractError(f"input {H}x{W} must be divisible by the network's downsampling factor {factor}")


def to_batch(images, in_channels=None, dtype=torch.float32):
    """Stack ``(H, W)`` or ``(H, W, ch)`` arrays into an ``(N, ch, H, W)`` tensor,
    replicating grayscale to ``in_channels``."""
    arr = np.stack([np.asarray(im) for im in images])
    if arr.ndim == 3:
        arr = arr[..., None]
    if in_channels and arr.shape[-1] == 1 and in_channels > 1:
        arr = np.repeat(arr, in_channels, axis=-1)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def forward(net, image):
    """Logits ``(H, W, C)`` for one ``(H, W[, ch])`` image."""
    H, W = np.asarray(image).shape[:2]
    check_divisible(net, H, W)
    cfg = getattr(net, "config", None)
    dtype = next(net.parameters()).dtype
    x = to_batch([image], cfg.in_channels if cfg else None, dtype=dtype)
    return net(x)[0].permute(1, 2, 0)


def softmax_probs(logits):
    """Per-pixel softmax over the last axis; numpy in, numpy out."""
    if isinstance(logits, torch.Tensor):
        if not bool(torch.isfinite(logits).all()):
            raise ContractError("logits contain non-finite values")
        return torch.softmax(logits, dim=-1)
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise ContractError("logits contain non-finite values")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_labels(prob) -> np.ndarray:
    """Argmax over classes; ties resolve to the lower class index."""
    if isinstance(prob, torch.Tensor):
        prob = prob.detach().cpu().numpy()
    return np.argmax(np.asarray(prob), axis=-1).astype(np.uint8)


def save_checkpoint(path, net, step: int = 0, extra: dict | None = None):
    tensors = {k: v.detach().cpu().contiguous().numpy() for k, v in net.state_dict().items()}
    config = {"net": asdict(net.config)}
    config.update(extra or {})
    meta = {"format": CHECKPOINT_FORMAT, "config": config, "step": int(step)}
    save_file(tensors, str(path), metadata={"ptseg": json.dumps(meta, sort_keys=True)})


def load_checkpoint(path):
    """Return ``(net, info)`` where ``info`` holds the config dict and ``step``."""
    path = str(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with safe_open(path, framework="numpy") as f:
            meta = json.loads((f.metadata() or {}).get("ptseg", "{}"))
    except Exception as exc:
        raise FormatError(f"{path}: not a checkpoint ({exc})", offset=0) from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: unexpected checkpoint format {meta.get('format')!r}", offset=8)
    config = meta["config"]
    net = build_network(NetConfig(**config["net"]))
    state = {k: torch.from_numpy(v.copy()) for k, v in load_file(path).items()}
    dtype = next(iter(state.values())).dtype
    net.to(dtype)
    net.load_state_dict(state)
    return net, {"config": config, "step": int(meta["step"])}
