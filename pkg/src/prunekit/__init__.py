"""Filter pruning toolkit: numpy autodiff engine, small CNNs, and
policy-gradient agents that learn which conv filters to drop while holding
validation accuracy inside a configured budget."""

from . import agent, cli, data, engine, model, optim, pipeline, reinforce, reward, surgery
from .agent import PruningAgent, build_agent, greedy_action, sample_actions
from .data import LabeledImageSet, generate_synthetic, holdout_split, load_idx
from .engine import Tensor, no_grad
from .model import (FlopsReport, ModelGraph, build_toy_cnn, count_flops,
                    load_checkpoint, save_checkpoint)
from .optim import Adam, ParamStore, SGD, adam_step, sgd_step
from .pipeline import (PruneReport, PruneRunConfig, keep_counts_from_report,
                       prune_l1_baseline, prune_network, prune_random_baseline)
from .reinforce import TrainLog, normalize_rewards, train_agent_one_layer
from .reward import (RewardBreakdown, RewardConfig, accuracy_term, efficiency_term,
                     evaluate_accuracy, evaluate_rollout, finetune)
from .surgery import (ActionVector, apply_action, kept_count, plant_duplicate_filters,
                      plant_zero_filters, zero_masked_clone)

__all__ = [
    "agent", "cli", "data", "engine", "model", "optim", "pipeline", "reinforce",
    "reward", "surgery",
    "ActionVector", "Adam", "FlopsReport", "LabeledImageSet", "ModelGraph",
    "ParamStore", "PruneReport", "PruneRunConfig", "PruningAgent", "RewardBreakdown",
    "RewardConfig", "SGD", "Tensor", "TrainLog",
    "accuracy_term", "adam_step", "apply_action", "build_agent", "build_toy_cnn",
    "count_flops", "efficiency_term", "evaluate_accuracy", "evaluate_rollout",
    "finetune", "generate_synthetic", "greedy_action", "holdout_split", "kept_count",
    "keep_counts_from_report", "load_checkpoint", "load_idx", "no_grad",
    "normalize_rewards", "plant_duplicate_filters", "plant_zero_filters",
    "prune_l1_baseline", "prune_network", "prune_random_baseline", "sample_actions",
    "save_checkpoint", "sgd_step", "train_agent_one_layer", "zero_masked_clone",
]
__version__ = "0.1.0"
