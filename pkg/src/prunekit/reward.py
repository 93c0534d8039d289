"""Rollout reward: prune, briefly fine-tune, evaluate, and score.

The reward of an action is the product of two terms: an accuracy term that is
1 at zero validation drop, hits 0 when the drop reaches the allowed bound b,
and goes negative beyond it; and an efficiency term log(N/C) that grows as
fewer filters are kept and is 0 when nothing is pruned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .data import LabeledImageSet
from .model import ModelGraph
from .optim import ParamStore, adam_step
from .surgery import ActionVector, apply_action, kept_count


class RewardError(Exception):
    pass


@dataclass
class RewardConfig:
    drop_bound: float                    # b, percentage points of allowed drop
    baseline_perf: float                 # p*, percent accuracy of the unpruned net
    finetune_epochs: int = 1
    finetune_lr: float = 0.01
    finetune_batch: int = 32
    finetune_subset: int | None = None   # cap on train samples per rollout
    eval_batch: int = 256
    metric: str = "classification-accuracy"

    def __post_init__(self):
        if self.drop_bound <= 0:
            raise RewardError(f"drop bound must be positive, got {self.drop_bound}")
        if not 0.0 <= self.baseline_perf <= 100.0:
            raise RewardError(f"baseline performance must be in [0, 100], got {self.baseline_perf}")
        if self.finetune_epochs < 0:
            raise RewardError("fine-tune epochs must be >= 0")
        if self.metric != "classification-accuracy":
            raise RewardError(f"unsupported metric {self.metric!r}")


@dataclass
class RewardBreakdown:
    p_hat: float          # percent accuracy of the pruned + fine-tuned net
    psi: float            # accuracy term
    phi: float            # efficiency term
    reward: float         # psi * phi
    kept: int
    n_filters: int


def accuracy_term(p_hat: float, cfg: RewardConfig) -> float:
    """(b - (p* - p_hat)) / b; 1 at zero drop, 0 at drop == b, negative past it."""
    return (cfg.drop_bound - (cfg.baseline_perf - p_hat)) / cfg.drop_bound


def efficiency_term(n_filters: int, kept: int) -> float:
    """log(N / C): 0 when all filters stay, growing as more are removed."""
    if not 1 <= kept <= n_filters:
        raise RewardError(f"kept count {kept} outside [1, {n_filters}]")
    return float(np.log(n_filters / kept))


def evaluate_accuracy(model: ModelGraph, data: LabeledImageSet, batch_size: int = 256) -> float:
    """Percent of correctly classified samples."""
    if len(data) == 0:
        raise RewardError("cannot evaluate on an empty dataset")
    logits = model.logits(data.images, batch_size)
    return float(100.0 * np.mean(np.argmax(logits, axis=1) == data.labels))


def finetune(model: ModelGraph, train: LabeledImageSet, epochs: int, lr: float = 0.01,
             batch_size: int = 32, seed=0, subset: int | None = None):
    """Train the model in place for a few epochs of cross-entropy descent.
    Optimizer state is local to this call; shuffling (and the optional
    training subset) derive from the seed."""
    if epochs <= 0:
        return
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if subset is not None and subset < len(train):
        train = train.subset(rng.choice(len(train), size=subset, replace=False))
    store = ParamStore()
    for name, p in model.parameters():
        store.register(name, p)
    n = len(train)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            logits = model.forward(train.images[idx])
            loss = engine.softmax_cross_entropy(logits, train.labels[idx])
            store.zero_grad()
            loss.backward()
            adam_step(store, lr)


def evaluate_rollout(base: ModelGraph, action: ActionVector, train: LabeledImageSet,
                     val: LabeledImageSet, cfg: RewardConfig, seed=0) -> RewardBreakdown:
    """Surgery -> fine-tune -> validation accuracy -> reward terms. The base
    model is never modified; all work happens on the surgered clone."""
    pruned = apply_action(base, action)
    finetune(pruned, train, cfg.finetune_epochs, cfg.finetune_lr,
             cfg.finetune_batch, seed, cfg.finetune_subset)
    p_hat = evaluate_accuracy(pruned, val, cfg.eval_batch)
    psi = accuracy_term(p_hat, cfg)
    phi = efficiency_term(len(action), kept_count(action))
    return RewardBreakdown(p_hat, psi, phi, psi * phi, kept_count(action), len(action))
