"""Whole-network pruning: walk the conv sites from the input side upward,
train an agent per site against the current pruned network, apply its action,
fine-tune, and move on. Also the L1-norm and random baseline pruners that
reuse a learned run's per-layer keep-counts for matched comparisons.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .agent import greedy_action
from .data import LabeledImageSet
from .model import ModelGraph, count_flops
from .reinforce import TrainLog, derive_seed, train_agent_one_layer
from .reward import RewardConfig, evaluate_accuracy, finetune
from .surgery import ActionVector, apply_action


class PipelineError(Exception):
    pass


@dataclass
class PruneRunConfig:
    drop_bound: float = 2.0
    layer_order: list | None = None       # conv-site indices; default: prunable sites ascending
    m_rollouts: int = 5
    agent_lr: float = 0.01
    max_epochs: int = 300
    convergence_window: int = 50
    convergence_tol: float = 1e-3
    rollout_finetune_epochs: int = 1
    finetune_lr: float = 0.01
    finetune_batch: int = 32
    finetune_subset: int | None = 256
    eval_batch: int = 256
    post_finetune_epochs: int = 2
    fixed_pstar: bool = False
    time_inference: bool = False
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.drop_bound <= 0:
            raise PipelineError(f"drop bound must be positive, got {self.drop_bound}")
        if self.m_rollouts < 2:
            raise PipelineError("need at least 2 rollouts per epoch")


@dataclass
class PruneReport:
    method: str
    seed: int
    drop_bound: float
    layers: list = field(default_factory=list)   # per conv site, in site order
    filters_before: int = 0
    filters_after: int = 0
    filter_ratio_pct: float = 0.0     # % of conv filters removed
    params_before: int = 0
    params_after: int = 0
    param_ratio_pct: float = 0.0      # % of parameters removed
    flops_before: int = 0
    flops_after: int = 0
    saved_flops_pct: float = 0.0
    val_before: float = 0.0
    val_after: float = 0.0
    test_before: float | None = None
    test_after: float | None = None
    inference_ms_before: float | None = None
    inference_ms_after: float | None = None

    @property
    def val_drop(self) -> float:
        return self.val_before - self.val_after

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "method", "seed", "drop_bound", "layers", "filters_before", "filters_after",
            "filter_ratio_pct", "params_before", "params_after", "param_ratio_pct",
            "flops_before", "flops_after", "saved_flops_pct", "val_before", "val_after",
            "test_before", "test_after", "inference_ms_before", "inference_ms_after")}
        d["val_drop"] = self.val_drop
        if self.test_before is not None and self.test_after is not None:
            d["test_drop"] = self.test_before - self.test_after
        return d

    def to_json(self, path: str):
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2)

    def to_csv(self, path: str):
        d = self.as_dict()
        d.pop("layers")
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(d))
            writer.writeheader()
            writer.writerow(d)

    def layers_to_csv(self, path: str):
        """Plot-ready per-layer prune ratios."""
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["site", "name", "original", "kept", "ratio_pct"])
            writer.writeheader()
            writer.writerows(self.layers)

    @classmethod
    def from_json(cls, path: str) -> "PruneReport":
        with open(path) as fh:
            d = json.load(fh)
        d.pop("val_drop", None)
        d.pop("test_drop", None)
        try:
            return cls(**d)
        except TypeError as e:
            raise PipelineError(f"{path}: malformed report ({e})") from None


def keep_counts_from_report(report: PruneReport) -> dict:
    """Per-site kept-filter counts, for matched-ratio baseline runs."""
    return {int(row["site"]): int(row["kept"]) for row in report.layers}


def time_inference(model: ModelGraph, images: np.ndarray, batch_size: int = 64,
                   warmup: int = 5, runs: int = 50) -> float:
    """Median wall-clock milliseconds per batch over timed runs."""
    x = images[:batch_size]
    for _ in range(warmup):
        model.logits(x, batch_size)
    samples = []
    for _ in range(runs):
        t0 = time.perf_counter()
        model.logits(x, batch_size)
        samples.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(samples))


def _site_rows(original_counts: dict, model: ModelGraph) -> list:
    rows = []
    for site in model.conv_sites():
        orig = original_counts[site.index]
        rows.append({"site": site.index, "name": site.name, "original": orig,
                     "kept": site.n_filters,
                     "ratio_pct": 100.0 * (1 - site.n_filters / orig)})
    return rows


def _finish_report(report: PruneReport, base: ModelGraph, pruned: ModelGraph,
                   val: LabeledImageSet, test: LabeledImageSet | None,
                   cfg: PruneRunConfig, original_counts: dict):
    report.layers = _site_rows(original_counts, pruned)
    report.filters_before = sum(original_counts.values())
    report.filters_after = sum(s.n_filters for s in pruned.conv_sites())
    report.filter_ratio_pct = 100.0 * (1 - report.filters_after / report.filters_before)
    report.params_before = base.num_params()
    report.params_after = pruned.num_params()
    report.param_ratio_pct = 100.0 * (1 - report.params_after / report.params_before)
    report.flops_before = count_flops(base).total_flops
    report.flops_after = count_flops(pruned).total_flops
    report.saved_flops_pct = 100.0 * (1 - report.flops_after / report.flops_before)
    report.val_after = evaluate_accuracy(pruned, val, cfg.eval_batch)
    if test is not None:
        report.test_after = evaluate_accuracy(pruned, test, cfg.eval_batch)
    if cfg.time_inference:
        report.inference_ms_before = time_inference(base, val.images)
        report.inference_ms_after = time_inference(pruned, val.images)


def _start_report(method: str, base: ModelGraph, val, test, cfg: PruneRunConfig) -> PruneReport:
    report = PruneReport(method=method, seed=cfg.seed, drop_bound=cfg.drop_bound)
    report.val_before = evaluate_accuracy(base, val, cfg.eval_batch)
    if test is not None:
        report.test_before = evaluate_accuracy(base, test, cfg.eval_batch)
    return report


def _resolve_order(model: ModelGraph, cfg: PruneRunConfig) -> list[int]:
    sites = model.conv_sites()
    if cfg.layer_order is None:
        return [s.index for s in sites if s.prunable]
    order = [int(i) for i in cfg.layer_order]
    for i in order:
        if not 0 <= i < len(sites):
            raise PipelineError(f"layer order names conv site {i}; model has {len(sites)}")
        if not sites[i].prunable:
            raise PipelineError(f"conv site {i} ({sites[i].name}) is not prunable")
    return order


def prune_network(base: ModelGraph, train: LabeledImageSet, val: LabeledImageSet,
                  cfg: PruneRunConfig, test: LabeledImageSet | None = None):
    """Learned pruning over every site in cfg.layer_order (input side first).
    After each site: apply the trained agent's action, fine-tune the running
    network, and re-measure the reference accuracy for the next site's reward
    (unless fixed_pstar keeps the original reference throughout).
    Returns (pruned model, PruneReport, {site: TrainLog}).
    """
    order = _resolve_order(base, cfg)
    report = _start_report("learned", base, val, test, cfg)
    original_counts = {s.index: s.n_filters for s in base.conv_sites()}
    current = base.clone()
    p_star = report.val_before
    logs: dict[int, TrainLog] = {}
    for site_idx in order:
        rcfg = RewardConfig(cfg.drop_bound, p_star, cfg.rollout_finetune_epochs,
                            cfg.finetune_lr, cfg.finetune_batch, cfg.finetune_subset,
                            cfg.eval_batch)
        agent, log = train_agent_one_layer(
            current, site_idx, train, val, rcfg, cfg.m_rollouts, cfg.agent_lr,
            cfg.max_epochs, seed=derive_seed(cfg.seed, 1, site_idx), workers=cfg.workers,
            convergence_window=cfg.convergence_window, convergence_tol=cfg.convergence_tol)
        logs[site_idx] = log
        if not log.entries:
            continue   # agent never trained (max_epochs 0): leave the site alone
        site = current.conv_sites()[site_idx]
        action = greedy_action(agent, site.conv.weight.data)
        current = apply_action(current, action)
        finetune(current, train, cfg.post_finetune_epochs, cfg.finetune_lr,
                 cfg.finetune_batch, seed=derive_seed(cfg.seed, 2, site_idx))
        if not cfg.fixed_pstar:
            p_star = evaluate_accuracy(current, val, cfg.eval_batch)
    _finish_report(report, base, current, val, test, cfg, original_counts)
    return current, report, logs


def _prune_by_counts(base: ModelGraph, keep_counts: dict, select_fn, method: str,
                     train: LabeledImageSet, val: LabeledImageSet,
                     cfg: PruneRunConfig, test: LabeledImageSet | None):
    """Shared scaffolding for criterion baselines: per site keep the
    select_fn-chosen filters at the given count, then fine-tune exactly like
    the learned pipeline does."""
    report = _start_report(method, base, val, test, cfg)
    original_counts = {s.index: s.n_filters for s in base.conv_sites()}
    current = base.clone()
    for site in base.conv_sites():
        if site.index not in keep_counts or not site.prunable:
            continue
        count = int(keep_counts[site.index])
        width = current.conv_sites()[site.index].n_filters
        if not 1 <= count <= width:
            raise PipelineError(f"keep count {count} invalid for site {site.index} of width {width}")
        if count == width:
            continue
        live = current.conv_sites()[site.index]
        keep_idx = select_fn(live, count)
        bits = np.zeros(width, dtype=np.int64)
        bits[keep_idx] = 1
        current = apply_action(current, ActionVector(site.index, bits))
        finetune(current, train, cfg.post_finetune_epochs, cfg.finetune_lr,
                 cfg.finetune_batch, seed=derive_seed(cfg.seed, 2, site.index))
    _finish_report(report, base, current, val, test, cfg, original_counts)
    return current, report


def prune_l1_baseline(base: ModelGraph, keep_counts: dict, train: LabeledImageSet,
                      val: LabeledImageSet, cfg: PruneRunConfig,
                      test: LabeledImageSet | None = None):
    """Keep the filters with the largest L1 weight norms; ties go to the
    lower filter index."""
    def select(site, count):
        norms = np.abs(site.conv.weight.data).sum(axis=(1, 2, 3))
        return np.argsort(-norms, kind="stable")[:count]
    return _prune_by_counts(base, keep_counts, select, "l1", train, val, cfg, test)


def prune_random_baseline(base: ModelGraph, keep_counts: dict, seed: int,
                          train: LabeledImageSet, val: LabeledImageSet,
                          cfg: PruneRunConfig, test: LabeledImageSet | None = None):
    """Uniform random keep-sets of the given sizes, reproducible from seed."""
    rng = np.random.default_rng(seed)

    def select(site, count):
        return rng.choice(site.n_filters, size=count, replace=False)
    return _prune_by_counts(base, keep_counts, select, "random", train, val, cfg, test)
