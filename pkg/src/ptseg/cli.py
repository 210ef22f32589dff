"""Command-line entry point: ``ptseg {synth,points,train,eval,count,report}``.

Exit codes: 0 success, 1 runtime or data error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from . import data as D
from .errors import ConfigError, ContractError, FormatError
from .model import NetConfig, build_network, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, count_eval, count_records, evaluate, train
from .metrics import SCORE_KEYS, game, mae_counts

log = logging.getLogger("ptseg")

SEED_ENV = "PTSEG_SEED"

DEFAULTS = {
    "seed": 0,
    "data": {
        "split_mode": "mixed",
        "fractions": [0.45, 0.05],
        "scan_split": None,
        "size": 352,
        "hu_window": list(D.DEFAULT_HU_WINDOW),
        "mean": list(D.IMAGENET_MEAN),
        "std": list(D.IMAGENET_STD),
        "points_dir": None,
    },
    "model": {"arch": "unet", "channels": list(NetConfig().channels), "in_channels": 3, "n_classes": 2},
    "train": {
        "loss": "cb_fliprot_pl",
        "lambda_weight": 1.0,
        "consistency_reduction": "mean",
        "family": None,
        "batch_size": 8,
        "epochs": 100,
        "learning_rate": 1e-4,
        "early_stop_metric": "dice",
    },
    "evaluation": {"game_levels": [0, 4]},
}

REPORT_COLUMNS = [("dice", "Dice"), ("iou", "IoU"), ("ppv", "PPV"), ("sensitivity", "Sens."), ("specificity", "Spec.")]


def config_schema() -> dict:
    return json.loads(resources.files("ptseg").joinpath("config_schema.json").read_text())


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(cfg, dotted, value):
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError("cannot override inside a non-mapping", dotted)
    node[keys[-1]] = value


def validate_config(raw) -> None:
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(e.message, ".".join(str(p) for p in e.absolute_path))


def load_config(path, overrides=()) -> dict:
    """Read, override, validate and fill defaults; relative paths are
    resolved against the config file's directory."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not KEY=VALUE", key)
        _set_path(raw, key, yaml.safe_load(value))
    validate_config(raw)
    cfg = _merge(DEFAULTS, raw)
    base = path.parent
    cfg["data"]["manifest"] = str((base / cfg["data"]["manifest"]).resolve())
    if cfg["data"]["points_dir"]:
        cfg["data"]["points_dir"] = str((base / cfg["data"]["points_dir"]).resolve())
    cfg["output_dir"] = str((base / cfg["output_dir"]).resolve())
    cfg["seed_source"] = "config"
    if os.environ.get(SEED_ENV):
        try:
            cfg["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer", "seed") from None
        cfg["seed_source"] = "env"
    return cfg


def _net_config(cfg):
    return NetConfig(**cfg["model"])


def _factor(net_cfg):
    return build_network(net_cfg).factor if net_cfg.arch != "fcn8" else 32


def _split_keys(manifest, dcfg, subset):
    split = D.build_split(manifest, dcfg["split_mode"], tuple(dcfg["fractions"]), dcfg.get("scan_split"))
    return split.keys(subset)


def _load_subset(manifest, dcfg, subset, seed, factor=1):
    keys = _split_keys(manifest, dcfg, subset)
    return D.load_slices(
        manifest,
        keys,
        dcfg["size"],
        (dcfg["mean"], dcfg["std"]),
        tuple(dcfg["hu_window"]),
        factor,
        dcfg.get("points_dir"),
        seed,
    )


def _dump(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


# -- commands ----------------------------------------------------------------

def cmd_synth(args):
    manifest = D.write_synthetic_dataset(args.out, args.n, args.seed, args.size, args.scans)
    print(f"wrote {manifest.n_slices} slices in {len(manifest.scans)} scans to {args.out}")
    return 0


def cmd_points(args):
    manifest = D.VolumeManifest.load(args.data)
    out_dir = Path(args.out) if args.out else manifest.root / "points"
    n_fg = n_bg = 0
    for j, scan in enumerate(manifest.scans):
        (out_dir / scan.scan_id).mkdir(parents=True, exist_ok=True)
        for i in range(len(scan.slices)):
            if scan.masks is None:
                raise ContractError(f"slice {scan.scan_id}/{i} ({scan.slices[i]}) has no mask")
            _, mask = D.load_raw_slice(manifest, scan, i)
            if args.size:
                mask = D.resize_mask(mask, args.size)
            ann = D.points_from_mask(mask, D.slice_rng(args.seed, j, i))
            ann.save(D.points_path(out_dir, scan.scan_id, i))
            n_fg += ann.n_foreground
            n_bg += ann.n_background
    print(f"foreground points: {n_fg}, background points: {n_bg}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config, args.set or [])
    if args.output_dir:
        cfg["output_dir"] = str(Path(args.output_dir).resolve())
    seed = cfg["seed"]
    dcfg = cfg["data"]
    net_cfg = _net_config(cfg)
    tcfg = TrainConfig(**cfg["train"], seed=seed)
    factor = _factor(net_cfg)

    manifest = D.VolumeManifest.load(dcfg["manifest"])
    train_set = _load_subset(manifest, dcfg, "train", seed, factor)
    val_set = _load_subset(manifest, dcfg, "val", seed, factor)
    test_set = _load_subset(manifest, dcfg, "test", seed, factor)

    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "event": "start",
        "seed": seed,
        "seed_source": cfg["seed_source"],
        "hu_window": dcfg["hu_window"],
        "loss": tcfg.loss,
        "n_train": len(train_set),
        "n_val": len(val_set),
        "n_test": len(test_set),
    }
    net = build_network(net_cfg, seed=seed)
    net, record = train(tcfg, net, train_set, val_set, log_path=out / "run_log.jsonl", log_header=header)

    extra = {"data": dcfg, "train": cfg["train"], "seed": seed, "evaluation": cfg["evaluation"]}
    save_checkpoint(out / "best.ckpt", net, record.best_step, extra)
    _dump(record.to_dict(), out / "run_record.json")

    report = {"loss": tcfg.loss, "split": "test", "seed": seed}
    if test_set:
        report.update(evaluate(net, test_set))
        records = count_records(net, test_set)
        H, W = test_set[0].shape
        report["mae"] = mae_counts(records)
        report["game_L"] = {str(L): game(records, L, H, W) for L in cfg["evaluation"]["game_levels"]}
    _dump(report, out / "report.json")
    print(f"best epoch {record.best_epoch} (val {tcfg.early_stop_metric} {record.best_val:.4f}); outputs in {out}")
    return 0


def _checkpoint_and_slices(args):
    net, info = load_checkpoint(args.checkpoint)
    conf = info["config"]
    dcfg = dict(conf["data"])
    manifest = D.VolumeManifest.load(args.data)
    slices = _load_subset(manifest, dcfg, args.split, conf.get("seed", 0), getattr(net, "factor", 1))
    if not slices:
        raise ContractError(f"split {args.split!r} is empty")
    return net, slices


def cmd_eval(args):
    net, slices = _checkpoint_and_slices(args)
    report = evaluate(net, slices)
    report["split"] = args.split
    if args.out:
        _dump(report, args.out)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_count(args):
    net, slices = _checkpoint_and_slices(args)
    result = count_eval(net, slices, args.game_L)
    if args.out:
        _dump(result, args.out)
    print(json.dumps(result, sort_keys=True))
    return 0


def render_report(rows):
    """Plain-text table and CSV text for ``[(label, report_dict), ...]``."""
    headers = ["Loss Function"] + [h for _, h in REPORT_COLUMNS]
    body = [[label] + [f"{rep[k]:.2f}" for k, _ in REPORT_COLUMNS] for label, rep in rows]
    widths = [max(len(r[i]) for r in [headers] + body) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(headers, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["loss"] + [k for k, _ in REPORT_COLUMNS])
    for label, rep in rows:
        writer.writerow([label] + [repr(float(rep[k])) for k, _ in REPORT_COLUMNS])
    return "\n".join(lines), buf.getvalue()


def cmd_report(args):
    rows = []
    for run in args.runs:
        path = Path(run) / "report.json"
        with open(path) as f:
            rep = json.load(f)
        missing = [k for k, _ in REPORT_COLUMNS if k not in rep]
        if missing:
            raise ContractError(f"{path} lacks {missing}")
        rows.append((rep.get("loss", Path(run).name), rep))
    table, csv_text = render_report(rows)
    print(table)
    Path(args.csv).write_text(csv_text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ptseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--scans", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("points", help="derive point annotations from masks")
    s.add_argument("--data", required=True, help="manifest.json")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output directory (default: <manifest dir>/points)")
    s.add_argument("--size", type=int, help="resize masks to this size first (match the training size)")
    s.set_defaults(func=cmd_points)

    s = sub.add_parser("train", help="train from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--output-dir")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.epochs=5")
    s.set_defaults(func=cmd_train)

    for name, func in (("eval", cmd_eval), ("count", cmd_count)):
        s = sub.add_parser(name, help=f"{name} a checkpoint on a split")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True, help="manifest.json")
        s.add_argument("--split", default="test", choices=D.SUBSETS)
        s.add_argument("--out")
        if name == "count":
            s.add_argument("--game-L", dest="game_L", type=int, default=4)
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="tabulate run reports")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--csv", default="report.csv")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, FormatError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
