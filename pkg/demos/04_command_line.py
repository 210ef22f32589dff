"""
The command-line workflow
=========================

The same pipeline through the ``ptseg`` command: write a dataset, derive
point labels, train from a config file, evaluate, count and tabulate.  The
calls go through ``ptseg.cli.main`` so the script runs without a shell; each
one matches a ``ptseg ...`` invocation.
"""

import json
import tempfile
from pathlib import Path

import yaml

from ptseg.cli import main

work = Path(tempfile.mkdtemp())
print("working in", work)

# ptseg synth --out DIR --n 40 --seed 0 --size 32 --scans 2
main(["synth", "--out", str(work / "ds"), "--n", "40", "--seed", "0", "--size", "32", "--scans", "2"])
# ptseg points --data DIR/manifest.json --seed 0
main(["points", "--data", str(work / "ds" / "manifest.json"), "--seed", "0"])

# paths in the config are relative to the config file
config = {
    "seed": 0,
    "output_dir": "runs/base",
    "data": {"manifest": "ds/manifest.json", "size": 32, "fractions": [0.5, 0.25]},
    "model": {"channels": [8, 16]},
    "train": {"loss": "pl", "epochs": 3, "batch_size": 4, "learning_rate": 0.001},
}
(work / "run.yaml").write_text(yaml.safe_dump(config))

runs = []
for loss in ("pl", "cb_flip_pl", "cb_fliprot_pl"):
    out = work / "runs" / loss
    # ptseg train --config run.yaml --set train.loss=... --output-dir ...
    main(["train", "--config", str(work / "run.yaml"), "--set", f"train.loss={loss}", "--output-dir", str(out)])
    runs.append(str(out))
    print(loss, "log lines:", len((out / "run_log.jsonl").read_text().splitlines()))

ckpt = str(work / "runs" / "cb_fliprot_pl" / "best.ckpt")
manifest = str(work / "ds" / "manifest.json")
main(["eval", "--checkpoint", ckpt, "--data", manifest, "--split", "test"])
main(["count", "--checkpoint", ckpt, "--data", manifest, "--game-L", "1"])

# one row per run, columns Dice/IoU/PPV/Sens./Spec.
main(["report", "--runs", *runs, "--csv", str(work / "report.csv")])
print(json.loads((work / "runs" / "pl" / "report.json").read_text())["split"])
