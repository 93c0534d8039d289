"""Command-line front end.

Subcommands:
  train-baseline   train the toy CNN on the configured dataset, save checkpoint
  prune            learned / l1 / random pruning against a saved baseline
  report           compare one or more pruning reports as an aligned table
  defaults         print the full default config as JSON

Every run derives all randomness from one root seed (config "seed", overridable
with --seed) and records it in each JSON artifact and output filename. Exit
codes: 0 success, 2 config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

from .data import DataError, LabeledImageSet, generate_synthetic, holdout_split, load_idx
from .engine import EngineError
from .model import (CheckpointError, ModelGraph, build_toy_cnn, count_flops,
                    load_checkpoint, save_checkpoint)
from .pipeline import (PipelineError, PruneReport, PruneRunConfig, keep_counts_from_report,
                       prune_l1_baseline, prune_network, prune_random_baseline)
from .reinforce import TrainerError, derive_seed
from .reward import RewardError, evaluate_accuracy, finetune
from .surgery import SurgeryError, plant_duplicate_filters

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(Exception):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs",
    "data": {
        "kind": "synthetic",          # synthetic | idx
        "n_per_class": 120,
        "num_classes": 10,
        "image_size": 16,
        "noise": 0.15,
        "val_fraction": 0.2,
        "test_fraction": 0.2,
        "images": None,               # IDX image file (kind == idx)
        "labels": None,               # IDX label file (kind == idx)
    },
    "model": {
        "widths": [16, 16, 32],
        "kernel_size": 3,
        "residual": False,
        "coupled_blocks": False,
        "plant_duplicates": 0.0,      # fraction of each layer duplicated at init
    },
    "train": {
        "epochs": 6,
        "lr": 0.01,
        "batch_size": 32,
    },
    "prune": {
        "bound": 2.0,
        "rollouts": 5,
        "agent_lr": 0.01,
        "max_epochs": 300,
        "convergence_window": 50,
        "convergence_tol": 1e-3,
        "rollout_finetune_epochs": 1,
        "finetune_lr": 0.01,
        "finetune_batch": 32,
        "finetune_subset": 256,
        "eval_batch": 256,
        "post_finetune_epochs": 2,
        "fixed_pstar": False,
        "time_inference": False,
    },
}


def _merge_config(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        dotted = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted!r} must be an object")
            out[key] = _merge_config(defaults[key], value, dotted + ".")
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return _merge_config(DEFAULT_CONFIG, user)


def build_dataset(cfg: dict):
    """(train, val, test) splits resolved from the config's data section."""
    d = cfg["data"]
    seed = cfg["seed"]
    if d["kind"] == "synthetic":
        ds = generate_synthetic(d["n_per_class"], d["num_classes"], d["image_size"],
                                d["noise"], seed=derive_seed(seed, 10))
    elif d["kind"] == "idx":
        if not d["images"] or not d["labels"]:
            raise ConfigError("data.kind 'idx' needs data.images and data.labels paths")
        ds = load_idx(d["images"], d["labels"])
    else:
        raise ConfigError(f"unknown data.kind {d['kind']!r}")
    hold = d["val_fraction"] + d["test_fraction"]
    if not 0.0 < hold < 1.0 or d["val_fraction"] <= 0 or d["test_fraction"] <= 0:
        raise ConfigError("val_fraction and test_fraction must be positive and sum below 1")
    train, rest = holdout_split(ds, hold, derive_seed(seed, 11))
    val, test = holdout_split(rest, d["test_fraction"] / hold, derive_seed(seed, 12))
    return train, val, test


def build_model(cfg: dict, dataset: LabeledImageSet) -> ModelGraph:
    m = cfg["model"]
    input_shape = dataset.images.shape[1:]
    model = build_toy_cnn(m["widths"], dataset.num_classes, input_shape,
                          seed=derive_seed(cfg["seed"], 13), kernel_size=m["kernel_size"],
                          residual=m["residual"], coupled_blocks=m["coupled_blocks"])
    model.meta["root_seed"] = cfg["seed"]
    if m["plant_duplicates"] > 0:
        plant_duplicate_filters(model, m["plant_duplicates"])
    return model


def _write_manifest(cfg: dict, command: str, outputs: list[str]):
    path = os.path.join(cfg["out_dir"], f"manifest_{command}_seed{cfg['seed']}.json")
    with open(path, "w") as fh:
        json.dump({"command": command, "seed": cfg["seed"], "config": cfg,
                   "outputs": sorted(outputs)}, fh, indent=2)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train_baseline(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    os.makedirs(cfg["out_dir"], exist_ok=True)
    train, val, test = build_dataset(cfg)
    model = build_model(cfg, train)
    t = cfg["train"]
    finetune(model, train, t["epochs"], t["lr"], t["batch_size"],
             seed=derive_seed(cfg["seed"], 14))
    val_acc = evaluate_accuracy(model, val)
    test_acc = evaluate_accuracy(model, test)
    ckpt = args.checkpoint or os.path.join(cfg["out_dir"], "baseline.ckpt")
    save_checkpoint(model, ckpt)
    summary = {"seed": cfg["seed"], "val_accuracy": val_acc, "test_accuracy": test_acc,
               "train_epochs": t["epochs"], "widths": cfg["model"]["widths"],
               "params": model.num_params(), "flops": count_flops(model).total_flops,
               "checkpoint": ckpt}
    report_path = os.path.join(cfg["out_dir"], f"baseline_report_seed{cfg['seed']}.json")
    with open(report_path, "w") as fh:
        json.dump(summary, fh, indent=2)
    _write_manifest(cfg, "train-baseline", [ckpt, report_path])
    print(f"baseline: val {val_acc:.4f}%  test {test_acc:.4f}%  -> {ckpt}")
    return EXIT_OK


def _keep_counts(args, model: ModelGraph) -> dict:
    if args.from_report:
        counts = keep_counts_from_report(PruneReport.from_json(args.from_report))
    elif args.keep_counts:
        try:
            wanted = [int(tok) for tok in args.keep_counts.split(",")]
        except ValueError:
            raise ConfigError(f"--keep-counts must be comma-separated integers, got {args.keep_counts!r}")
        prunable = [s.index for s in model.prunable_sites()]
        if args.layer is not None:
            prunable = [args.layer]
        if len(wanted) != len(prunable):
            raise ConfigError(f"--keep-counts names {len(wanted)} layers, expected {len(prunable)}")
        counts = dict(zip(prunable, wanted))
    else:
        raise ConfigError("--method l1/random needs matched ratios: pass --from-report or --keep-counts")
    if args.layer is not None:
        if args.layer not in counts:
            raise ConfigError(f"--layer {args.layer} not present in the supplied keep counts")
        counts = {args.layer: counts[args.layer]}
    return counts


def cmd_prune(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.bound is not None:
        cfg["prune"]["bound"] = args.bound
    if args.fixed_pstar:
        cfg["prune"]["fixed_pstar"] = True
    if cfg["prune"]["bound"] <= 0:
        raise ConfigError(f"drop bound must be positive, got {cfg['prune']['bound']}")
    os.makedirs(cfg["out_dir"], exist_ok=True)

    ckpt = args.checkpoint or os.path.join(cfg["out_dir"], "baseline.ckpt")
    if not os.path.exists(ckpt):
        raise DataError(f"baseline checkpoint not found: {ckpt} (run train-baseline first)")
    model = load_checkpoint(ckpt)
    train, val, test = build_dataset(cfg)

    p = cfg["prune"]
    workers = args.rollout_workers or min(os.cpu_count() or 1, p["rollouts"])
    run_cfg = PruneRunConfig(
        drop_bound=p["bound"], layer_order=None, m_rollouts=p["rollouts"],
        agent_lr=p["agent_lr"], max_epochs=p["max_epochs"],
        convergence_window=p["convergence_window"], convergence_tol=p["convergence_tol"],
        rollout_finetune_epochs=p["rollout_finetune_epochs"], finetune_lr=p["finetune_lr"],
        finetune_batch=p["finetune_batch"], finetune_subset=p["finetune_subset"],
        eval_batch=p["eval_batch"], post_finetune_epochs=p["post_finetune_epochs"],
        fixed_pstar=p["fixed_pstar"], time_inference=p["time_inference"],
        seed=cfg["seed"], workers=workers)
    if args.layer is not None:
        sites = model.conv_sites()
        if not 0 <= args.layer < len(sites):
            raise ConfigError(f"--layer {args.layer} out of range; model has {len(sites)} conv sites")
        if not sites[args.layer].prunable:
            raise ConfigError(f"conv site {args.layer} ({sites[args.layer].name}) is not prunable")
        run_cfg.layer_order = [args.layer]

    outputs = []
    logs = {}
    if args.method == "learned":
        pruned, report, logs = prune_network(model, train, val, run_cfg, test)
    elif args.method == "l1":
        pruned, report = prune_l1_baseline(model, _keep_counts(args, model), train, val,
                                           run_cfg, test)
    else:
        pruned, report = prune_random_baseline(model, _keep_counts(args, model),
                                               derive_seed(cfg["seed"], 3), train, val,
                                               run_cfg, test)

    tag = f"{args.method}_seed{cfg['seed']}"
    paths = {"json": os.path.join(cfg["out_dir"], f"report_{tag}.json"),
             "csv": os.path.join(cfg["out_dir"], f"report_{tag}.csv"),
             "layers": os.path.join(cfg["out_dir"], f"layers_{tag}.csv")}
    report.to_json(paths["json"])
    report.to_csv(paths["csv"])
    report.layers_to_csv(paths["layers"])
    outputs.extend(paths.values())
    for site_idx, log in logs.items():
        lp = os.path.join(cfg["out_dir"], f"trainlog_{tag}_site{site_idx}.csv")
        log.to_csv(lp)
        outputs.append(lp)
    pruned_ckpt = os.path.join(cfg["out_dir"], f"pruned_{tag}.ckpt")
    save_checkpoint(pruned, pruned_ckpt)
    outputs.append(pruned_ckpt)
    _write_manifest(cfg, f"prune-{args.method}", outputs)
    print(f"{args.method}: filters removed {report.filter_ratio_pct:.2f}%  "
          f"params removed {report.param_ratio_pct:.2f}%  "
          f"saved FLOPs {report.saved_flops_pct:.2f}%  "
          f"val {report.val_before:.4f} -> {report.val_after:.4f} (drop {report.val_drop:.4f})")
    print(f"report: {paths['json']}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        reports = [PruneReport.from_json(p) for p in args.reports]
    except (FileNotFoundError, json.JSONDecodeError, PipelineError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    cols = ["method", "seed", "filter_ratio_pct", "param_ratio_pct", "saved_flops_pct",
            "val_before", "val_after", "val_drop", "test_before", "test_after"]
    rows = []
    for r in reports:
        d = r.as_dict()
        rows.append([d["method"], str(d["seed"])] +
                    [("-" if d.get(c) is None else f"{d[c]:.4f}") for c in cols[2:]])
    widths = [max(len(c), *(len(row[i]) for row in rows)) for i, c in enumerate(cols)]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for row in rows:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    csv_path = args.csv or os.path.join(os.path.dirname(args.reports[0]) or ".", "comparison.csv")
    import csv as csv_mod
    with open(csv_path, "w", newline="") as fh:
        writer = csv_mod.writer(fh)
        writer.writerow(cols)
        writer.writerows(rows)
    print(f"csv: {csv_path}")
    return EXIT_OK


def cmd_defaults(_args) -> int:
    print(json.dumps(DEFAULT_CONFIG, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunekit",
                                     description="Filter pruning with policy-gradient agents.")
    sub = parser.add_subparsers(dest="command", required=True)

    tb = sub.add_parser("train-baseline", help="train and checkpoint the baseline CNN")
    tb.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    tb.add_argument("--seed", type=int, help="override the config root seed")
    tb.add_argument("--checkpoint", help="checkpoint output path")
    tb.set_defaults(fn=cmd_train_baseline)

    pr = sub.add_parser("prune", help="prune a trained baseline")
    pr.add_argument("--config", help="JSON config file")
    pr.add_argument("--seed", type=int, help="override the config root seed")
    pr.add_argument("--checkpoint", help="baseline checkpoint (default <out_dir>/baseline.ckpt)")
    which = pr.add_mutually_exclusive_group(required=True)
    which.add_argument("--all", action="store_true", help="prune every prunable conv site")
    which.add_argument("--layer", type=int, help="prune a single conv site index")
    pr.add_argument("--bound", type=float, help="allowed validation accuracy drop (points)")
    pr.add_argument("--method", choices=("learned", "l1", "random"), default="learned")
    pr.add_argument("--from-report", help="learned report JSON supplying matched keep-counts")
    pr.add_argument("--keep-counts", help="comma-separated kept filters per prunable site")
    pr.add_argument("--fixed-pstar", action="store_true",
                    help="keep the original baseline accuracy as the reward reference")
    pr.add_argument("--rollout-workers", type=int,
                    help="parallel rollout evaluations (default: cores, capped at rollouts)")
    pr.set_defaults(fn=cmd_prune)

    rp = sub.add_parser("report", help="tabulate pruning reports")
    rp.add_argument("reports", nargs="+", help="report JSON paths")
    rp.add_argument("--csv", help="comparison CSV output path")
    rp.set_defaults(fn=cmd_report)

    df = sub.add_parser("defaults", help="print the default config")
    df.set_defaults(fn=cmd_defaults)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, PipelineError, RewardError, TrainerError, SurgeryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (EngineError, FloatingPointError, OverflowError, ZeroDivisionError) as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
