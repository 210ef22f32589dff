import json

import numpy as np
import pytest
import torch

from conftest import constant_net, synth_slices, threshold_net
from ptseg.errors import ContractError, NonFiniteLossError
from ptseg.geometry import FAMILIES
from ptseg.losses import point_loss
from ptseg.model import NetConfig, build_network, load_checkpoint, save_checkpoint, to_batch
from ptseg.trainer import TrainConfig, count_eval, evaluate, make_streams, train

SMALL = NetConfig(channels=(4, 8))


@pytest.fixture(scope="module")
def tiny():
    s = synth_slices(14, seed=1)
    return s[:10], s[10:]


def reference_pl_loop(cfg, slices, repeats):
    """Plain point-loss loop written against the public pieces only."""
    net = build_network(SMALL, seed=cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    shuffle_rng, _ = make_streams(cfg.seed)
    x_all = to_batch([s.image for s in slices])
    pms = [torch.from_numpy(s.point_mask.astype(np.int64)) for s in slices]
    losses = []
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(len(slices))
        total = 0.0
        for start in range(0, len(slices), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits = net(x_all[idx])
            loss = 0.0
            for k, i in enumerate(idx):
                p = torch.softmax(logits[k].permute(1, 2, 0), dim=-1)
                for _ in range(repeats):
                    loss = loss + point_loss(p, pms[i])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
        losses.append(total / len(slices))
    return losses


def test_lambda_zero_identity_matches_pl_loop(tiny):
    train_set, val_set = tiny
    cfg = TrainConfig(loss="cb_flip_pl", family="identity", lambda_weight=0.0, epochs=3, batch_size=4, learning_rate=1e-3, seed=7)
    _, rec = train(cfg, build_network(SMALL, seed=7), train_set, val_set)
    ref = reference_pl_loop(cfg, train_set, repeats=2)
    assert np.allclose([e["train_loss"] for e in rec.epochs], ref, rtol=0, atol=1e-9)


def test_pl_matches_reference_loop(tiny):
    train_set, val_set = tiny
    cfg = TrainConfig(loss="pl", epochs=3, batch_size=4, learning_rate=1e-3, seed=3)
    _, rec = train(cfg, build_network(SMALL, seed=3), train_set, val_set)
    assert np.allclose([e["train_loss"] for e in rec.epochs], reference_pl_loop(cfg, train_set, 1), rtol=0, atol=1e-9)


def test_one_step_per_batch():
    s = synth_slices(10, seed=2)
    cfg = TrainConfig(loss="pl", epochs=1, batch_size=8, learning_rate=1e-3)
    _, rec = train(cfg, build_network(SMALL), s[:8], s[8:])
    assert rec.steps == 1 and len(rec.transform_log) == 1


def test_best_pointer_and_log(tiny, tmp_path):
    train_set, val_set = tiny
    cfg = TrainConfig(loss="cb_fliprot_pl", epochs=4, batch_size=4, learning_rate=1e-3)
    net, rec = train(cfg, build_network(SMALL), train_set, val_set, log_path=tmp_path / "log.jsonl", log_header={"event": "start"})
    dices = [e["val_dice"] for e in rec.epochs]
    assert rec.best_val == max(dices) and rec.epochs[rec.best_epoch - 1]["val_dice"] == max(dices)
    assert evaluate(net, val_set)["dice"] == rec.best_val
    lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines[0] == {"event": "start"} and len(lines) == 5
    assert set(lines[1]) == {"epoch", "train_loss", "val_dice", "val_iou", "lr", "transforms_histogram"}
    assert sum(lines[1]["transforms_histogram"].values()) == len(train_set)


@pytest.mark.parametrize("loss,family", [("cb_flip_pl", "flip"), ("cb_fliprot_pl", "fliprot")])
def test_transforms_drawn_from_family(tiny, loss, family):
    train_set, val_set = tiny
    _, rec = train(TrainConfig(loss=loss, epochs=3, batch_size=4, learning_rate=1e-3), build_network(SMALL), train_set, val_set)
    used = {name for step in rec.transform_log for name in step}
    assert used <= {str(t) for t in FAMILIES[family]}
    assert sum(len(step) for step in rec.transform_log) == 3 * len(train_set)


def test_full_sup_trains(tiny):
    train_set, val_set = tiny
    _, rec = train(TrainConfig(loss="full_sup", epochs=2, batch_size=5, learning_rate=1e-3), build_network(SMALL), train_set, val_set)
    assert rec.steps == 4 and all(np.isfinite(e["train_loss"]) for e in rec.epochs)


def test_training_is_deterministic(tiny):
    train_set, val_set = tiny
    cfg = TrainConfig(loss="cb_fliprot_pl", epochs=2, batch_size=4, learning_rate=1e-3, seed=11)
    a, ra = train(cfg, build_network(SMALL, seed=11), train_set, val_set)
    b, rb = train(cfg, build_network(SMALL, seed=11), train_set, val_set)
    assert ra.epochs == rb.epochs and ra.transform_log == rb.transform_log
    assert all(torch.equal(a.state_dict()[k], b.state_dict()[k]) for k in a.state_dict())


def test_input_validation(tiny):
    train_set, val_set = tiny
    with pytest.raises(ContractError):
        train(TrainConfig(loss="pl", epochs=1), build_network(SMALL), [], val_set)
    with pytest.raises(ContractError):
        train(TrainConfig(loss="pl", epochs=1), build_network(SMALL), train_set, [])
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)
    with pytest.raises(ContractError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ContractError):
        TrainConfig(loss="lcfcn")


def test_non_finite_loss_aborts(tiny):
    train_set, val_set = tiny
    net = build_network(SMALL)
    with torch.no_grad():
        net.head.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError, match="epoch 1, batch 0"):
        train(TrainConfig(loss="pl", epochs=1, batch_size=4), net, train_set, val_set)


def test_evaluate_perfect_stub():
    s = synth_slices(6, seed=4, noise=0.0)
    rep = evaluate(threshold_net(), s)
    assert all(rep[k] == 1.0 for k in ("iou", "dice", "ppv", "sensitivity", "specificity"))
    assert rep == evaluate(threshold_net(), s)


def test_evaluate_all_background():
    s = synth_slices(3, seed=4, regions=(0, 0))
    rep = evaluate(constant_net(0), s)
    assert rep["specificity"] == 1.0 and "specificity" not in rep["undefined"]
    assert set(rep["undefined"]) == {"iou", "dice", "ppv", "sensitivity"}


def test_evaluate_requires_masks():
    s = synth_slices(2, seed=4)
    s[1].full_mask = None
    with pytest.raises(ContractError):
        evaluate(threshold_net(), s)


def test_count_eval_stubs():
    s = synth_slices(8, seed=5, noise=0.0)
    assert count_eval(threshold_net(), s, 4) == {"mae": 0.0, "game": 0.0, "L": 4}
    total_regions = sum(len(sl.points.points) // 2 for sl in s)
    empty = count_eval(constant_net(0), s, 2)
    assert empty["mae"] == pytest.approx(total_regions / len(s))
    r0 = count_eval(constant_net(0), s, 0)
    assert r0["game"] == r0["mae"]


def test_checkpoint_round_trip_evaluates_equal(tiny, tmp_path):
    train_set, val_set = tiny
    net, rec = train(TrainConfig(loss="cb_flip_pl", epochs=2, batch_size=4, learning_rate=1e-3), build_network(SMALL), train_set, val_set)
    before = evaluate(net, val_set)
    save_checkpoint(tmp_path / "c.ckpt", net, rec.best_step)
    loaded, info = load_checkpoint(tmp_path / "c.ckpt")
    assert evaluate(loaded, val_set) == before and info["step"] == rec.best_step
