"""Gradient checking the autodiff engine.

Builds a small conv net, backpropagates a cross-entropy loss, and compares a
sample of the analytic gradients against central finite differences. A healthy
64-bit implementation lands around 1e-8 relative error; anything under 1e-4
is a pass.
"""

import numpy as np

from prunekit import engine
from prunekit.model import build_toy_cnn


def finite_difference(loss_fn, arr, idx, h=1e-5):
    flat = arr.reshape(-1)
    keep = flat[idx]
    flat[idx] = keep + h
    up = loss_fn()
    flat[idx] = keep - h
    down = loss_fn()
    flat[idx] = keep
    return (up - down) / (2 * h)


def main():
    rng = np.random.default_rng(0)
    net = build_toy_cnn([6, 8], num_classes=4, input_shape=(1, 10, 10), seed=1)
    x = rng.standard_normal((5, 1, 10, 10))
    labels = rng.integers(0, 4, 5)

    def build_loss():
        return engine.softmax_cross_entropy(net.forward(x), labels)

    loss = build_loss()
    for _, p in net.parameters():
        p.zero_grad()
    loss.backward()
    print(f"loss {float(loss.data):.6f}\n")
    print(f"{'parameter':<16} {'coord':>6} {'analytic':>13} {'numeric':>13} {'rel err':>10}")

    worst = 0.0
    for name, p in net.parameters():
        for idx in rng.choice(p.data.size, size=3, replace=False):
            analytic = p.grad.reshape(-1)[idx]
            numeric = finite_difference(lambda: float(build_loss().data), p.data, idx)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
            print(f"{name:<16} {idx:>6} {analytic:>13.6e} {numeric:>13.6e} {rel:>10.2e}")

    print(f"\nworst relative error: {worst:.2e} ({'PASS' if worst < 1e-4 else 'FAIL'} at 1e-4)")


if __name__ == "__main__":
    main()
