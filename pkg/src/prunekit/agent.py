"""Pruning agents: small policy networks that read one conv layer's weight
matrix and emit an independent Bernoulli keep-probability per filter.

A layer with N filters of shape (m, h, w) is rearranged into an N x M matrix
with M = m*h*w. Large inputs (M > 2**4) get a conv policy net that treats the
matrix as a 1-channel image; small ones get a plain MLP.
"""

from __future__ import annotations

import numpy as np

from . import engine
from .engine import Tensor
from .model import Conv2D, Dense
from .optim import ParamStore
from .surgery import ActionVector

CONV_AGENT_THRESHOLD = 2 ** 4
PROB_CLAMP = 1e-6


class AgentError(Exception):
    pass


class PruningAgent:
    """Policy pi(A | W, theta) over keep/remove bits for one conv site."""

    def __init__(self, layer_index: int, n_filters: int, input_dim: int,
                 arch: str, stages: list, store: ParamStore):
        self.layer_index = layer_index
        self.n_filters = n_filters
        self.input_dim = input_dim
        self.arch = arch
        self.stages = stages
        self.store = store

    def _prepare(self, weights: np.ndarray) -> np.ndarray:
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim > 2:
            w = w.reshape(w.shape[0], -1)
        if w.shape != (self.n_filters, self.input_dim):
            raise AgentError(
                f"weights reshape to {w.shape}, agent expects ({self.n_filters}, {self.input_dim})")
        peak = np.abs(w).max()
        return w / peak if peak > 0 else w

    def probabilities(self, weights: np.ndarray) -> Tensor:
        """Keep-probability per filter, shape (n_filters,), clamped inside
        (0, 1) so log-probs stay finite. Differentiable w.r.t. the policy
        parameters."""
        w = self._prepare(weights)
        if self.arch == "conv-agent":
            t = engine.constant(w[None, None, :, :])
        else:
            t = engine.constant(w.reshape(1, -1))
        for stage in self.stages:
            t = stage(t)
        t = engine.clamp(engine.sigmoid(t), PROB_CLAMP, 1.0 - PROB_CLAMP)
        return engine.reshape(t, (self.n_filters,))


def build_agent(n_filters: int, m: int, h: int, w: int, layer_index: int = 0,
                seed: int = 0, conv_widths=(8, 16, 32, 32), fc_hidden: int = 64) -> PruningAgent:
    """Pick the architecture by the size of the per-filter weight vector
    M = m*h*w: conv policy net when M > 16, MLP otherwise."""
    if min(n_filters, m, h, w) < 1:
        raise AgentError("all agent input dims must be >= 1")
    input_dim = m * h * w
    rng = np.random.default_rng(seed)
    store = ParamStore()
    stages = []

    def track(name, layer):
        for pname, p in layer.params():
            store.register(f"{name}.{pname}", p)
        return layer

    if input_dim > CONV_AGENT_THRESHOLD:
        arch = "conv-agent"
        ch, rows, cols = 1, n_filters, input_dim
        for i, width in enumerate(conv_widths):
            conv = track(f"conv{i}", Conv2D(ch, width, 7, 7, 1, 3, False, rng))
            stages.append(conv.forward)
            stages.append(engine.relu)
            stages.append(engine.maxpool2x2)
            ch = width
            rows, cols = max(1, rows // 2), max(1, cols // 2)
        stages.append(engine.flatten)
        flat = ch * rows * cols
    else:
        arch = "fc-agent"
        flat = n_filters * input_dim
    fc1 = track("fc1", Dense(flat, fc_hidden, rng))
    fc2 = track("fc2", Dense(fc_hidden, n_filters, rng))
    stages.extend([fc1.forward, engine.relu, fc2.forward])
    return PruningAgent(layer_index, n_filters, input_dim, arch, stages, store)


def sample_actions(agent: PruningAgent, weights: np.ndarray, m_rollouts: int,
                   seed, max_resample: int = 10) -> list[ActionVector]:
    """Draw m_rollouts independent action vectors from the current policy.
    All-zero draws are resampled up to max_resample times, then the highest
    probability filter is force-kept. Deterministic given the seed."""
    if m_rollouts < 1:
        raise AgentError(f"need at least 1 rollout, got {m_rollouts}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    with engine.no_grad():
        p = agent.probabilities(weights).data
    actions = []
    for _ in range(m_rollouts):
        bits = None
        for _ in range(max_resample + 1):
            draw = (rng.random(agent.n_filters) < p).astype(np.int64)
            if draw.any():
                bits = draw
                break
        if bits is None:
            bits = np.zeros(agent.n_filters, dtype=np.int64)
            bits[int(np.argmax(p))] = 1
        ll = float(np.sum(bits * np.log(p) + (1 - bits) * np.log1p(-p)))
        actions.append(ActionVector(agent.layer_index, bits, ll))
    return actions


def greedy_action(agent: PruningAgent, weights: np.ndarray) -> ActionVector:
    """Deterministic readout of a trained policy: keep filters with
    probability >= 0.5; if none clears the bar, keep the single most likely
    filter so the layer never empties."""
    with engine.no_grad():
        p = agent.probabilities(weights).data
    bits = (p >= 0.5).astype(np.int64)
    if not bits.any():
        bits[int(np.argmax(p))] = 1
    ll = float(np.sum(bits * np.log(p) + (1 - bits) * np.log1p(-p)))
    return ActionVector(agent.layer_index, bits, ll)


def log_prob_grad(agent: PruningAgent, weights: np.ndarray, action: ActionVector) -> dict:
    """Gradient of log pi(action | weights, theta) w.r.t. every policy
    parameter, via a backward pass through the Bernoulli log-likelihood."""
    agent.store.zero_grad()
    probs = agent.probabilities(weights)
    ll = engine.bernoulli_log_prob(probs, action.bits[None, :])
    engine.sum_all(ll).backward()
    return agent.store.grads()
