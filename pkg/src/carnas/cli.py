"""Experiment command line: gen / train / eval / ablate / inspect.

Configuration is a flat JSON document; every field can be overridden by a
--key value flag (flags win over the file). Exit codes: 0 ok, 1 usage or
config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import nas
from .autodiff import Tensor
from .data import (DataError, SpMotifConfig, dataset_stats, generate_spmotif,
                   load_jsonl, make_batches, save_jsonl)
from .gnn import OPERATOR_NAMES
from .trainer import (CarnasModel, CheckpointError, ConfigError, TrainConfig,
                      evaluate, restore_model, run_training)
from .causal import edge_score_dump

DEFAULT_SEEDS = [0, 1, 2]


def _out_root(args_out):
    return args_out or os.environ.get("CARNAS_OUT") or "runs"


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _add_config_flags(parser):
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            parser.add_argument(flag, dest=f.name, action="store_true",
                                default=None)
        else:
            parser.add_argument(flag, dest=f.name, type=type(f.default),
                                default=None)


def _resolve_config(args) -> TrainConfig:
    base = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            base = json.load(fh)
    cfg = TrainConfig.from_dict(base)
    for f in fields(TrainConfig):
        override = getattr(args, f.name, None)
        if override is not None:
            setattr(cfg, f.name, override)
    cfg.validate()
    return cfg


def build_parser():
    parser = argparse.ArgumentParser(prog="carnas",
                                     description="causal-aware graph NAS experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a Spurious-Motif dataset")
    p_gen.add_argument("--bias", type=float, default=0.9)
    p_gen.add_argument("--num", type=int, default=3000)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--train-frac", type=float, default=0.8)
    p_gen.add_argument("--val-frac", type=float, default=0.1)
    p_gen.add_argument("--out", required=True)

    for name, alias_help in (("train", "train per seed and summarize"),
                             ("ablate", "alias of train for ablation variants")):
        p = sub.add_parser(name, help=alias_help)
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--data", required=True, help="dataset JSONL path")
        p.add_argument("--out", help="output root (or CARNAS_OUT)")
        p.add_argument("--run-name", default="run")
        p.add_argument("--seeds", type=int, nargs="+", default=None)
        p.add_argument("--ablate", choices=["no-arch", "no-cpred", "no-both"],
                       default=None)
        p.add_argument("--baseline", choices=("uniform",) + OPERATOR_NAMES,
                       default=None, help="fixed-architecture supernet baseline")
        p.add_argument("--resume", default=None)
        p.add_argument("--log-test-each-epoch", action="store_true")
        _add_config_flags(p)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--split", default="test")
    p_eval.add_argument("--out", help="optional JSON output path")
    p_eval.add_argument("--allow-config-mismatch", action="store_true")

    p_ins = sub.add_parser("inspect", help="export operator probabilities and edge scores")
    p_ins.add_argument("--ckpt", required=True)
    p_ins.add_argument("--data", required=True)
    p_ins.add_argument("--split", default="test")
    p_ins.add_argument("--out", required=True, help="output directory")
    p_ins.add_argument("--num-graphs", type=int, default=20,
                       help="graphs to dump edge scores for")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    cfg = SpMotifConfig(num_graphs=args.num, bias=args.bias, seed=args.seed,
                        train_frac=args.train_frac, val_frac=args.val_frac)
    cfg.validate()
    ds = generate_spmotif(cfg)
    save_jsonl(ds, args.out)
    stats = dataset_stats(ds)
    stats_path = os.path.splitext(args.out)[0] + ".stats.json"
    with open(stats_path, "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
    print(f"wrote {len(ds)} graphs to {args.out}")
    print(json.dumps(stats["splits"], indent=2, sort_keys=True))
    return 0


def cmd_train(args):
    cfg = _resolve_config(args)
    if args.ablate in ("no-arch", "no-both"):
        cfg.disable_arch_reg = True
    if args.ablate in ("no-cpred", "no-both"):
        cfg.disable_cpred = True
    if args.baseline:
        cfg.arch_mode = args.baseline
    cfg.validate()

    dataset = load_jsonl(args.data)
    if not dataset.graphs:
        raise DataError(f"{args.data} contains no graphs")
    seeds = args.seeds if args.seeds is not None else list(DEFAULT_SEEDS)
    root = os.path.join(_out_root(args.out), args.run_name)
    os.makedirs(root, exist_ok=True)
    data_hash = _sha256_file(args.data)

    metric_values = {}
    for seed in seeds:
        seed_cfg = TrainConfig.from_dict(cfg.to_dict())
        seed_cfg.seed = seed
        seed_dir = os.path.join(root, f"seed-{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        manifest = {
            "config": seed_cfg.to_dict(),
            "config_hash": seed_cfg.hash(),
            "dataset": {"path": os.path.abspath(args.data), "sha256": data_hash},
            "seeds": seeds,
            "layout": {"metrics": "metrics.csv", "checkpoint": "ckpt-final.bin"},
        }
        with open(os.path.join(seed_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        result = run_training(seed_cfg, dataset, seed_dir,
                              resume_from=args.resume,
                              log_test_each_epoch=args.log_test_each_epoch)
        for name, value in result.final_metric.items():
            metric_values.setdefault(name, []).append(value)
        print(f"seed {seed}: {result.final_metric}")

    summary = {"seeds": seeds, "metrics": {}}
    for name, values in metric_values.items():
        summary["metrics"][name] = {
            "mean": float(np.mean(values)),
            "std": float(np.std(values)),
            "values": [float(v) for v in values],
        }
    with open(os.path.join(root, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary["metrics"], indent=2, sort_keys=True))
    return 0


def cmd_eval(args):
    model, meta = restore_model(args.ckpt,
                                allow_config_mismatch=args.allow_config_mismatch)
    dataset = load_jsonl(args.data)
    if dataset.feature_dim != model.feature_dim:
        raise DataError(f"dataset feature dim {dataset.feature_dim} != "
                        f"model feature dim {model.feature_dim}")
    metrics = evaluate(model, dataset, args.split)
    payload = {"split": args.split, "epoch": meta["epoch"], **metrics}
    print(json.dumps(payload, sort_keys=True))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    return 0


def cmd_inspect(args):
    model, _ = restore_model(args.ckpt)
    dataset = load_jsonl(args.data)
    os.makedirs(args.out, exist_ok=True)

    by_class = {}
    dumped = []
    for batch in make_batches(dataset, args.split, 64, shuffle=False):
        x = Tensor(batch.features)
        if model.is_causal:
            split, _, h_c, _ = model.causal_pipeline(batch, x)
            mats = nas.arch_matrices(nas.arch_coefficients(model.bank, h_c))
        else:
            split = None
            mats = np.stack(model.fixed_alphas(batch.num_graphs), axis=1)
        for i in range(batch.num_graphs):
            g = batch.graphs[i]
            key = g.meta["C"] if (g.meta and "C" in g.meta) else g.label
            by_class.setdefault(int(key), []).append(mats[i])
        if split is not None and len(dumped) < args.num_graphs:
            dumped.extend(edge_score_dump(batch, split))

    for cls, mats in sorted(by_class.items()):
        mean = np.mean(mats, axis=0)
        path = os.path.join(args.out, f"arch_class_{cls}.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "op_index", "op_name", "alpha"])
            for k in range(mean.shape[0]):
                for u, name in enumerate(OPERATOR_NAMES):
                    writer.writerow([k, u, name, repr(float(mean[k, u]))])
    with open(os.path.join(args.out, "edge_scores.jsonl"), "w") as fh:
        for rec in dumped[:args.num_graphs]:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"wrote {len(by_class)} class tables and "
          f"{min(len(dumped), args.num_graphs)} edge-score records to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        if args.command == "gen":
            return cmd_gen(args)
        if args.command in ("train", "ablate"):
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "inspect":
            return cmd_inspect(args)
        return 1
    except (ConfigError, DataError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (CheckpointError, Exception) as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
