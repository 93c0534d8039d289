"""Dense-tensor autodiff core.

Reverse-mode gradients over a dynamically recorded computation graph, with
just the kernels small CNNs and filter-scoring policy nets need: conv2d,
2x2 max-pool, fully-connected, relu, sigmoid, softmax cross-entropy and
Bernoulli log-likelihood. Everything runs on dense row-major numpy arrays,
float64 by default so gradient checks have headroom; build models with
float32 arrays for a lighter runtime width.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

DEFAULT_DTYPE = np.float64


class EngineError(Exception):
    pass


class ShapeError(EngineError):
    pass


class GraphError(EngineError):
    pass


_grad_state = threading.local()


def _grad_on() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference). The flag is
    thread-local, so concurrent rollout threads do not disturb each other."""
    prev = _grad_on()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    """A dense array plus an optional gradient slot and graph linkage.

    Ops on Tensors record their inputs and a backward closure; calling
    ``backward()`` on a scalar result walks the recorded graph in reverse
    topological order and accumulates gradients into every tensor with
    ``requires_grad`` set. Parameter gradients accumulate across backward
    calls until explicitly zeroed.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if not self._parents:
            raise GraphError("backward() called without a recorded forward computation")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Convenience operators used by model code and tests.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def parameter(data) -> Tensor:
    """Wrap an array as a trainable tensor with an allocated gradient slot."""
    return Tensor(np.array(data), requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=False)


def _result(data: np.ndarray, parents: tuple) -> Tensor:
    out = Tensor(data)
    if _grad_on() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None  # allocated lazily during backward
        out._parents = parents
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data + b.data, (a, b))

    def backward():
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(out.grad, b.data.shape))

    out._backward_fn = backward if out.requires_grad else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _result(a.data * b.data, (a, b))

    def backward():
        _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    out._backward_fn = backward if out.requires_grad else None
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _result(a.data * c, (a,))

    def backward():
        _accum(a, out.grad * c)

    out._backward_fn = backward if out.requires_grad else None
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = _result(a.data.reshape(shape), (a,))

    def backward():
        _accum(a, out.grad.reshape(a.data.shape))

    out._backward_fn = backward if out.requires_grad else None
    return out


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.data.shape[0], -1))


def sum_all(a: Tensor) -> Tensor:
    out = _result(np.asarray(a.data.sum()), (a,))

    def backward():
        _accum(a, np.full_like(a.data, out.grad))

    out._backward_fn = backward if out.requires_grad else None
    return out


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0.0), (a,))

    def backward():
        _accum(a, out.grad * (a.data > 0))

    out._backward_fn = backward if out.requires_grad else None
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign for overflow-free exp
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _result(s, (a,))

    def backward():
        _accum(a, out.grad * s * (1.0 - s))

    out._backward_fn = backward if out.requires_grad else None
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = _result(np.clip(a.data, lo, hi), (a,))
    inside = (a.data > lo) & (a.data < hi)

    def backward():
        _accum(a, out.grad * inside)

    out._backward_fn = backward if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# layer kernels
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully-connected layer: x[N,D] @ w[O,D].T + b[O]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weight, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear input dim {x.data.shape[1]} != weight in-dim {w.data.shape[1]}")
    if b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"linear bias shape {b.data.shape} != ({w.data.shape[0]},)")
    out = _result(x.data @ w.data.T + b.data, (x, w, b))

    def backward():
        g = out.grad
        _accum(x, g @ w.data)
        _accum(w, g.T @ x.data)
        _accum(b, g.sum(axis=0))

    out._backward_fn = backward if out.requires_grad else None
    return out


def _conv_out_dims(h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    return ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with w[K,C,kh,kw] plus per-filter bias."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.data.shape} and {w.data.shape}")
    n, c, h, wd = x.data.shape
    k, cw, kh, kw = w.data.shape
    if c != cw:
        raise ShapeError(f"conv2d input has {c} channels but weight expects {cw}")
    if b.data.shape != (k,):
        raise ShapeError(f"conv2d bias shape {b.data.shape} != ({k},)")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho, wo = _conv_out_dims(h, wd, kh, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                      # N,C,Ho,Wo,kh,kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    w2 = w.data.reshape(k, c * kh * kw)
    y = (cols @ w2.T + b.data).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    out = _result(np.ascontiguousarray(y), (x, w, b))

    def backward():
        g2 = out.grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        _accum(w, (g2.T @ cols).reshape(k, c, kh, kw))
        _accum(b, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j]
            _accum(x, dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp)

    out._backward_fn = backward if out.requires_grad else None
    return out


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; a size-1 axis is passed through and
    an odd trailing row/column is dropped (floor semantics)."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects 4-D input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    wh = 2 if h > 1 else 1
    ww = 2 if w > 1 else 1
    ho, wo = h // wh, w // ww
    crop = x.data[:, :, :ho * wh, :wo * ww]
    blocks = crop.reshape(n, c, ho, wh, wo, ww).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, wh * ww)
    idx = blocks.argmax(axis=-1)  # first max wins on ties
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    out = _result(np.ascontiguousarray(y), (x,))

    def backward():
        dblocks = np.zeros_like(blocks)
        np.put_along_axis(dblocks, idx[..., None], out.grad[..., None], axis=-1)
        dcrop = dblocks.reshape(n, c, ho, wo, wh, ww).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * wh, wo * ww)
        if crop.shape == x.data.shape:
            _accum(x, dcrop)
        else:
            dx = np.zeros_like(x.data)
            dx[:, :, :ho * wh, :wo * ww] = dcrop
            _accum(x, dx)

    out._backward_fn = backward if out.requires_grad else None
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N,K] logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"labels out of range for {k} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sm = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    out = _result(np.asarray(nll.mean()), (logits,))

    def backward():
        g = sm.copy()
        g[np.arange(n), labels] -= 1.0
        _accum(logits, out.grad * g / n)

    out._backward_fn = backward if out.requires_grad else None
    return out


def bernoulli_log_prob(probs: Tensor, actions: np.ndarray) -> Tensor:
    """Per-row log-likelihood of binary actions[M,N] under independent
    Bernoulli keep-probabilities probs[N]. Probabilities must lie strictly
    inside (0,1); callers clamp upstream."""
    if probs.data.ndim != 1:
        raise ShapeError(f"bernoulli_log_prob expects 1-D probabilities, got {probs.data.shape}")
    a = np.asarray(actions, dtype=probs.data.dtype)
    if a.ndim != 2 or a.shape[1] != probs.data.shape[0]:
        raise ShapeError(f"actions shape {a.shape} incompatible with {probs.data.shape[0]} probabilities")
    p = probs.data
    if (p <= 0).any() or (p >= 1).any():
        raise ShapeError("probabilities must lie strictly inside (0,1); clamp before calling")
    ll = a @ np.log(p) + (1.0 - a) @ np.log1p(-p)
    out = _result(ll, (probs,))

    def backward():
        g = out.grad[:, None]
        _accum(probs, (g * (a / p - (1.0 - a) / (1.0 - p))).sum(axis=0))

    out._backward_fn = backward if out.requires_grad else None
    return out
