"""Training objectives on per-pixel probability maps.

Probability maps are ``(H, W, C)`` torch tensors (softmax outputs).  Point
masks are ``(H, W)`` integer grids holding ``UNLABELED`` (-1) or a class id.

The consistency-based objective for one image ``x`` and sampled transform
``t`` is::

    L = PL(f(x), y) + PL(f(t(x)), t(y)) + lambda * |t(f(x)) - f(t(x))|_1

with the L1 term summed or averaged over every pixel and class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .annotations import UNLABELED
from .errors import ContractError
from .geometry import apply_transform, get_family

PROB_FLOOR = 1e-12

# loss name -> transform family used by the second branch (None: single branch)
LOSS_FAMILIES = {
    "pl": None,
    "cb_flip_pl": "flip",
    "cb_fliprot_pl": "fliprot",
    "full_sup": None,
}


@dataclass
class LossConfig:
    lambda_weight: float = 1.0
    consistency_reduction: str = "mean"
    family: object = "fliprot"

    def __post_init__(self):
        if self.lambda_weight < 0:
            raise ContractError(f"lambda_weight must be >= 0, got {self.lambda_weight}")
        if self.consistency_reduction not in ("sum", "mean"):
            raise ContractError(f"consistency_reduction must be 'sum' or 'mean', got {self.consistency_reduction!r}")
        get_family(self.family)


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None and np.asarray(x).dtype.kind == "f" else None
    return torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)


def point_loss(prob, pmask, background_only: bool = False):
    """Cross-entropy summed over labeled pixels.

    With no labeled pixels, ``background_only`` makes every pixel count as
    labeled background; otherwise the loss is zero.
    """
    prob = _as_tensor(prob)
    pmask = _as_tensor(pmask).long()
    if prob.shape[:2] != pmask.shape:
        raise ContractError(f"prob {tuple(prob.shape)} and point mask {tuple(pmask.shape)} disagree")
    labeled = pmask != UNLABELED
    if not bool(labeled.any()):
        if not background_only:
            return prob.sum() * 0.0
        return -torch.log(prob[..., 0].clamp_min(PROB_FLOOR)).sum()
    picked = prob[labeled].gather(1, pmask[labeled].unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).sum()


def consistency_loss(prob_x, prob_tx, t, reduction: str = "mean"):
    """L1 distance between ``t(prob_x)`` and ``prob_tx`` over pixels and classes."""
    prob_x, prob_tx = _as_tensor(prob_x), _as_tensor(prob_tx)
    moved = apply_transform(t, prob_x)
    if moved.shape != prob_tx.shape:
        raise ContractError(
            f"transformed prob {tuple(moved.shape)} does not match second-branch prob {tuple(prob_tx.shape)}"
        )
    diff = (moved - prob_tx).abs()
    if reduction == "sum":
        return diff.sum()
    if reduction == "mean":
        return diff.mean()
    raise ContractError(f"unknown reduction {reduction!r}")


def cb_total_loss(prob_x, prob_tx, pmask, t, cfg: LossConfig, background_only: bool = False):
    """Point loss on both branches plus the weighted consistency term."""
    pmask = np.asarray(pmask) if not isinstance(pmask, torch.Tensor) else pmask
    if tuple(pmask.shape) != tuple(_as_tensor(prob_x).shape[:2]):
        raise ContractError("point mask does not match prob_x geometry")
    loss = point_loss(prob_x, pmask, background_only)
    loss = loss + point_loss(prob_tx, apply_transform(t, pmask), background_only)
    if cfg.lambda_weight:
        loss = loss + cfg.lambda_weight * consistency_loss(prob_x, prob_tx, t, cfg.consistency_reduction)
    return loss


def full_supervision_loss(prob, mask):
    """Mean per-pixel cross-entropy plus a soft-IoU term on the foreground channel.

    Stands in for the fully supervised upper bound; an empty union gives a
    zero IoU term.
    """
    prob = _as_tensor(prob)
    mask = _as_tensor(mask).long()
    if prob.shape[:2] != mask.shape:
        raise ContractError(f"prob {tuple(prob.shape)} and mask {tuple(mask.shape)} disagree")
    picked = prob.gather(2, mask.unsqueeze(2)).squeeze(2)
    ce = -torch.log(picked.clamp_min(PROB_FLOOR)).mean()
    p_fg = prob[..., 1]
    m = mask.to(prob.dtype)
    inter = (p_fg * m).sum()
    union = p_fg.sum() + m.sum() - inter
    if float(union.detach()) <= 0.0:
        return ce
    return ce + (1.0 - inter / union)
