"""
Training with point labels
==========================

Trains the small U-Net on synthetic slices with the point loss alone and
with the consistency objective, then scores both on held-out slices against
full masks.  Takes about a minute on one CPU core.
"""

import numpy as np

from ptseg import data as D
from ptseg.annotations import SynthConfig
from ptseg.model import NetConfig, build_network
from ptseg.trainer import TrainConfig, count_eval, evaluate, train

stats = (D.IMAGENET_MEAN, D.IMAGENET_STD)
raw = D.synth_raw(160, seed=7, cfg=SynthConfig(H=48, W=48, radius_range=(3, 7)))
slices = [D.make_slice(u8, m, 48, stats, seed=7, slice_index=i) for i, (u8, m) in enumerate(raw)]
train_set, val_set, test_set = slices[:100], slices[100:120], slices[120:]

# training only ever sees the points; the masks are kept for evaluation
print("labelled pixels per training slice:", np.mean([len(s.points) for s in train_set]))

for loss in ("pl", "cb_fliprot_pl"):
    net = build_network(NetConfig(), seed=0)
    cfg = TrainConfig(loss=loss, epochs=10, learning_rate=1e-3, seed=0)
    net, record = train(cfg, net, train_set, val_set)
    s = evaluate(net, test_set)
    c = count_eval(net, test_set, L=2)
    print(f"{loss:14s} best epoch {record.best_epoch:2d}  dice {s['dice']:.3f}  iou {s['iou']:.3f}  "
          f"count mae {c['mae']:.2f}  game(2) {c['game']:.2f}")
    if record.transform_log[0]:
        print("  transforms drawn in the last epoch:", record.epochs[-1]["transforms_histogram"])
