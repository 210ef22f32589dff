"""Two-branch training loop, evaluation and counting evaluation.

For every image of a batch the loop runs the network on ``x``, draws a
transform ``t`` from the configured family, runs the network on ``t(x)``
and adds ``PL(x) + PL(t(x)) + lambda * L1(t(f(x)), f(t(x)))`` to the batch
loss.  One Adam step is taken per batch.  The "pl" and "full_sup" losses
skip the second branch.

Validation Dice is computed after every epoch and the best epoch's weights
are returned.
"""

from __future__ import annotations

import copy
import json
import time
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import ContractError, NonFiniteLossError
from .geometry import Transform, apply_transform, get_family, sample_transform
from .losses import LOSS_FAMILIES, LossConfig, consistency_loss, full_supervision_loss, point_loss
from .metrics import CountRecord, accumulate_confusion, centroids_from_mask, game, mae_counts, metrics_report
from .model import check_divisible, predict_labels, to_batch


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 100
    learning_rate: float = 1e-4
    loss: str = "cb_fliprot_pl"
    lambda_weight: float = 1.0
    consistency_reduction: str = "mean"
    family: str | None = None  # overrides the family implied by ``loss``
    seed: int = 0
    early_stop_metric: str = "dice"
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    num_threads: int | None = 1
    eval_batch_size: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.loss not in LOSS_FAMILIES:
            raise ContractError(f"unknown loss {self.loss!r}; expected one of {sorted(LOSS_FAMILIES)}")
        self.betas = tuple(self.betas)
        self.loss_config()

    @property
    def two_branch(self):
        return self.loss.startswith("cb_")

    def loss_config(self) -> LossConfig:
        family = self.family or LOSS_FAMILIES[self.loss] or "identity"
        return LossConfig(self.lambda_weight, self.consistency_reduction, family)


@dataclass
class RunRecord:
    config: dict
    seed: int
    epochs: list = field(default_factory=list)  # one dict per epoch, as in the run log
    transform_log: list = field(default_factory=list)  # per optimizer step: transform names
    best_epoch: int = -1
    best_val: float = float("-inf")
    best_step: int = 0
    steps: int = 0
    wall_clock: float = 0.0

    def to_dict(self):
        return asdict(self)


def make_streams(seed: int):
    """``(shuffle_rng, transform_rng)``: independent generators for batch
    order and transform sampling."""
    shuffle_seq, transform_seq = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.default_rng(shuffle_seq), np.random.default_rng(transform_seq)


class _threads:
    def __init__(self, n):
        self.n = n

    def __enter__(self):
        self.prev = torch.get_num_threads()
        if self.n:
            torch.set_num_threads(self.n)

    def __exit__(self, *exc):
        torch.set_num_threads(self.prev)


def _probs(logits_chw):
    return torch.softmax(logits_chw.permute(1, 2, 0), dim=-1)


def _dataset_tensors(slices, net, dtype):
    cfg = getattr(net, "config", None)
    x = to_batch([s.image for s in slices], cfg.in_channels if cfg else None, dtype=dtype)
    return x


def train(cfg: TrainConfig, net, train_set, val_set, log_path=None, log_header=None):
    """Fit ``net`` in place and return ``(best_net, RunRecord)``.

    ``train_set`` slices need point labels (or full masks for "full_sup");
    ``val_set`` slices need full masks.  ``log_path`` receives one JSON line
    per epoch, preceded by ``log_header`` when given.
    """
    if not train_set:
        raise ContractError("train_set is empty")
    if not val_set:
        raise ContractError("val_set is empty")
    loss_cfg = cfg.loss_config()
    family = get_family(loss_cfg.family)
    dtype = next(net.parameters()).dtype
    for s in train_set:
        check_divisible(net, *s.shape)
        if cfg.loss == "full_sup" and s.full_mask is None:
            raise ContractError(f"slice {s.scan_id}/{s.slice_index} has no mask for full supervision")
        if cfg.loss != "full_sup" and s.points is None:
            raise ContractError(f"slice {s.scan_id}/{s.slice_index} has no point labels")

    record = RunRecord(config=asdict(cfg), seed=cfg.seed)
    started = time.perf_counter()
    log_file = open(log_path, "w") if log_path else None
    try:
        with _threads(cfg.num_threads):
            if log_file and log_header is not None:
                log_file.write(json.dumps(log_header, sort_keys=True) + "\n")
            x_all = _dataset_tensors(train_set, net, dtype)
            if cfg.loss == "full_sup":
                targets = [torch.from_numpy(s.full_mask.astype(np.int64)) for s in train_set]
            else:
                targets = [torch.from_numpy(s.point_mask.astype(np.int64)) for s in train_set]
            bg_only = [s.background_only for s in train_set]

            shuffle_rng, transform_rng = make_streams(cfg.seed)
            opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)
            best_state = copy.deepcopy(net.state_dict())
            n = len(train_set)

            for epoch in range(1, cfg.epochs + 1):
                net.train()
                order = shuffle_rng.permutation(n)
                epoch_loss = 0.0
                hist = Counter()
                for b, start in enumerate(range(0, n, cfg.batch_size)):
                    idx = order[start : start + cfg.batch_size]
                    x = x_all[idx]
                    logits = net(x)
                    loss = 0.0
                    if cfg.two_branch:
                        ts = [sample_transform(transform_rng, family) for _ in idx]
                        moved = [apply_transform(t, x[k], axes=(-2, -1)) for k, t in enumerate(ts)]
                        if len({m.shape for m in moved}) == 1:
                            logits_t = net(torch.stack(moved))
                        else:
                            logits_t = [net(m[None])[0] for m in moved]
                        for k, i in enumerate(idx):
                            p_x = _probs(logits[k])
                            p_tx = _probs(logits_t[k])
                            y = targets[i]
                            loss = loss + point_loss(p_x, y, bg_only[i])
                            loss = loss + point_loss(p_tx, apply_transform(ts[k], y), bg_only[i])
                            if loss_cfg.lambda_weight:
                                loss = loss + loss_cfg.lambda_weight * consistency_loss(
                                    p_x, p_tx, ts[k], loss_cfg.consistency_reduction
                                )
                        names = [str(t) for t in ts]
                        hist.update(names)
                        record.transform_log.append(names)
                    else:
                        for k, i in enumerate(idx):
                            p_x = _probs(logits[k])
                            if cfg.loss == "full_sup":
                                loss = loss + full_supervision_loss(p_x, targets[i])
                            else:
                                loss = loss + point_loss(p_x, targets[i], bg_only[i])
                        record.transform_log.append([])
                    if not torch.isfinite(loss):
                        raise NonFiniteLossError(f"non-finite loss {float(loss.detach())} at epoch {epoch}, batch {b}")
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    record.steps += 1
                    epoch_loss += float(loss.detach())

                val = evaluate(net, val_set, cfg.eval_batch_size)
                entry = {
                    "epoch": epoch,
                    "train_loss": epoch_loss / n,
                    "val_dice": val["dice"],
                    "val_iou": val["iou"],
                    "lr": cfg.learning_rate,
                    "transforms_histogram": {k: hist[k] for k in sorted(hist)},
                }
                record.epochs.append(entry)
                if log_file:
                    log_file.write(json.dumps(entry, sort_keys=True) + "\n")
                    log_file.flush()
                score = val[cfg.early_stop_metric]
                if score > record.best_val:
                    record.best_val = score
                    record.best_epoch = epoch
                    record.best_step = record.steps
                    best_state = copy.deepcopy(net.state_dict())
    finally:
        if log_file:
            log_file.close()

    net.load_state_dict(best_state)
    net.eval()
    record.wall_clock = time.perf_counter() - started
    return net, record


@torch.no_grad()
def predict_masks(net, slices, batch_size: int = 32):
    """Binary predicted masks, one per slice, in order."""
    net.eval()
    dtype = next(net.parameters()).dtype
    out = []
    for start in range(0, len(slices), batch_size):
        chunk = slices[start : start + batch_size]
        for s in chunk:
            check_divisible(net, *s.shape)
        logits = net(_dataset_tensors(chunk, net, dtype))
        probs = torch.softmax(logits.permute(0, 2, 3, 1), dim=-1)
        out.extend(predict_labels(p) for p in probs)
    return out


def _require_masks(slices):
    for s in slices:
        if s.full_mask is None:
            raise ContractError(f"slice {s.scan_id}/{s.slice_index} has no ground-truth mask")


def evaluate(net, slices, batch_size: int = 32) -> dict:
    """Micro-aggregated segmentation scores against full masks."""
    _require_masks(slices)
    totals = None
    for s, pred in zip(slices, predict_masks(net, slices, batch_size)):
        totals = accumulate_confusion(pred, s.full_mask, totals)
    return metrics_report(totals)


def count_records(net, slices, batch_size: int = 32):
    _require_masks(slices)
    return [
        CountRecord(centroids_from_mask(pred), centroids_from_mask(s.full_mask))
        for s, pred in zip(slices, predict_masks(net, slices, batch_size))
    ]


def count_eval(net, slices, L: int = 4, batch_size: int = 32) -> dict:
    """MAE and GAME(L) of region counts; all slices must share one size."""
    records = count_records(net, slices, batch_size)
    H, W = slices[0].shape
    return {"mae": mae_counts(records), "game": game(records, L, H, W), "L": int(L)}
