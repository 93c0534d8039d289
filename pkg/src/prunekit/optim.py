"""Parameter registry and the SGD / Adam update rules."""

from __future__ import annotations

import numpy as np

from .engine import ShapeError, Tensor


class ParamStore:
    """Ordered collection of named trainable tensors.

    Every registered tensor carries a same-shape gradient slot; optimizer
    moment estimates live here too, keyed by parameter name, so the update
    rules themselves stay stateless.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._state: dict[str, dict] = {}

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must require gradients")
        if tensor.grad is None or tensor.grad.shape != tensor.data.shape:
            tensor.grad = np.zeros_like(tensor.data)
        self._params[name] = tensor
        return tensor

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {name: p.grad.copy() for name, p in self._params.items()}

    def state(self, name: str) -> dict:
        """Optimizer state for a parameter (created empty on first access)."""
        if name not in self._params:
            raise KeyError(name)
        return self._state.setdefault(name, {})


def sgd_step(store: ParamStore, lr: float, zero_grad: bool = False):
    """Plain gradient-descent update over every parameter in the store."""
    for name, p in store.items():
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape} for {name!r}")
        p.data -= lr * p.grad
    if zero_grad:
        store.zero_grad()


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, zero_grad: bool = False):
    """One bias-corrected Adam update over every parameter in the store."""
    for name, p in store.items():
        g = p.grad
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}")
        st = store.state(name)
        if "m" not in st:
            st["m"] = np.zeros_like(p.data)
            st["v"] = np.zeros_like(p.data)
            st["t"] = 0
        st["t"] += 1
        st["m"] = beta1 * st["m"] + (1.0 - beta1) * g
        st["v"] = beta2 * st["v"] + (1.0 - beta2) * (g * g)
        m_hat = st["m"] / (1.0 - beta1 ** st["t"])
        v_hat = st["v"] / (1.0 - beta2 ** st["t"])
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    if zero_grad:
        store.zero_grad()


class SGD:
    def __init__(self, store: ParamStore, lr: float):
        self.store = store
        self.lr = lr

    def step(self, zero_grad: bool = False):
        sgd_step(self.store, self.lr, zero_grad=zero_grad)


class Adam:
    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, zero_grad: bool = False):
        adam_step(self.store, self.lr, self.beta1, self.beta2, self.eps, zero_grad=zero_grad)
