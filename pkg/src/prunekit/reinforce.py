"""Policy-gradient training of one pruning agent.

Each epoch samples a handful of candidate actions, scores every candidate by
pruning a clone of the network and measuring the reward, standardizes the
rewards within the epoch, and takes one Adam ascent step on the
reward-weighted log-likelihood of the sampled actions.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .agent import PruningAgent, build_agent, sample_actions
from .data import LabeledImageSet
from .model import ModelGraph
from .optim import adam_step
from .reward import RewardConfig, evaluate_rollout
from .surgery import ActionVector, kept_count


class TrainerError(Exception):
    pass


@dataclass
class RolloutRecord:
    action: ActionVector
    reward: float
    normalized_reward: float


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)   # dict per completed epoch

    def append(self, epoch: int, mean_reward: float, mean_kept: float,
               min_prob: float, max_prob: float):
        self.entries.append({"epoch": epoch, "mean_reward": mean_reward,
                             "mean_kept": mean_kept, "min_prob": min_prob,
                             "max_prob": max_prob})

    def column(self, key: str) -> np.ndarray:
        return np.array([e[key] for e in self.entries])

    def moving_average(self, key: str, window: int) -> np.ndarray:
        """Trailing window mean; entry i averages rows max(0, i-window+1)..i."""
        vals = self.column(key)
        out = np.empty_like(vals, dtype=np.float64)
        for i in range(len(vals)):
            out[i] = vals[max(0, i - window + 1):i + 1].mean()
        return out

    def to_csv(self, path: str):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["epoch", "mean_reward", "mean_kept", "min_prob", "max_prob"])
            writer.writeheader()
            writer.writerows(self.entries)


def normalize_rewards(rewards) -> list[float]:
    """Standardize to zero mean and unit population standard deviation.
    A constant batch carries no preference signal and maps to all zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise TrainerError(f"need at least 2 rewards to normalize, got {r.size}")
    std = r.std()
    if std == 0.0:
        return [0.0] * r.size
    return list((r - r.mean()) / std)


def policy_gradient(agent: PruningAgent, weights: np.ndarray, actions: list[ActionVector],
                    norm_rewards) -> dict:
    """Ascent-direction gradient sum_i R_i * d(log pi(A_i))/d(theta), one
    backward pass over the whole batch."""
    agent.store.zero_grad()
    probs = agent.probabilities(weights)
    bits = np.stack([a.bits for a in actions])
    ll = engine.bernoulli_log_prob(probs, bits)
    weighted = engine.mul(ll, engine.constant(np.asarray(norm_rewards, dtype=np.float64)))
    engine.sum_all(weighted).backward()
    return agent.store.grads()


def derive_seed(root: int, *tags: int) -> int:
    """Stable child seed for a named stage of a run, well mixed from the
    single root seed."""
    return int(np.random.SeedSequence((root,) + tags).generate_state(1, np.uint32)[0])


def _epoch_rng(seed: int, epoch: int, lane: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, epoch, lane))))


def train_agent_one_layer(model: ModelGraph, layer_index: int, train: LabeledImageSet,
                          val: LabeledImageSet, cfg: RewardConfig, m_rollouts: int = 5,
                          lr: float = 0.01, max_epochs: int = 300, seed: int = 0,
                          rollout_fn=None, workers: int = 1,
                          convergence_window: int = 50, convergence_tol: float = 1e-3,
                          agent_kwargs: dict | None = None):
    """Train a fresh agent to prune one conv site of the model.

    rollout_fn(action, rollout_seed) -> float reward; the default prunes a
    clone, fine-tunes it per cfg, and scores it on val. Actions are sampled
    before any evaluation starts, so the worker count cannot change results.
    Stops early when the trailing moving average of the mean reward settles.
    Returns (agent, TrainLog).
    """
    sites = model.conv_sites()
    if not 0 <= layer_index < len(sites):
        raise TrainerError(f"layer index {layer_index} out of range (have {len(sites)} conv sites)")
    site = sites[layer_index]
    if not site.prunable:
        raise TrainerError(f"conv site {layer_index} ({site.name}) is not prunable")
    if m_rollouts < 2:
        raise TrainerError(f"need at least 2 rollouts per epoch, got {m_rollouts}")

    if rollout_fn is None:
        def rollout_fn(action, rollout_seed):
            return evaluate_rollout(model, action, train, val, cfg, rollout_seed).reward

    w_layer = site.conv.weight.data
    k, m, h, w = w_layer.shape
    agent = build_agent(k, m, h, w, layer_index, seed=seed, **(agent_kwargs or {}))
    log = TrainLog()
    workers = max(1, min(workers, m_rollouts))
    prev_ma, settled = None, 0

    for epoch in range(max_epochs):
        actions = sample_actions(agent, w_layer, m_rollouts, _epoch_rng(seed, epoch, 0))
        seeds = [_epoch_rng(seed, epoch, 1 + i) for i in range(m_rollouts)]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rewards = list(pool.map(rollout_fn, actions, seeds))
        else:
            rewards = [rollout_fn(a, s) for a, s in zip(actions, seeds)]
        rewards = [float(r) for r in rewards]
        normed = normalize_rewards(rewards)
        buffer = [RolloutRecord(a, r, nr) for a, r, nr in zip(actions, rewards, normed)]

        agent.store.zero_grad()
        probs = agent.probabilities(w_layer)
        bits = np.stack([rec.action.bits for rec in buffer])
        ll = engine.bernoulli_log_prob(probs, bits)
        weighted = engine.mul(ll, engine.constant(np.array([rec.normalized_reward for rec in buffer])))
        loss = engine.scale(engine.sum_all(weighted), -1.0)   # ascent via negated objective
        loss.backward()
        adam_step(agent.store, lr)

        with engine.no_grad():
            p_now = agent.probabilities(w_layer).data
        log.append(epoch, float(np.mean(rewards)),
                   float(np.mean([kept_count(a) for a in actions])),
                   float(p_now.min()), float(p_now.max()))

        if len(log.entries) >= convergence_window:
            ma = float(log.column("mean_reward")[-convergence_window:].mean())
            if prev_ma is not None and abs(ma - prev_ma) < convergence_tol:
                settled += 1
                if settled >= convergence_window:
                    break
            else:
                settled = 0
            prev_ma = ma
    return agent, log
