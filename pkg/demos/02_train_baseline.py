"""Training the toy CNN on the synthetic image set.

Generates the 10-class gratings-and-blobs dataset, splits it, trains the
3-conv baseline for a few epochs of Adam, and prints accuracy plus the model's
size and cost accounting. This is the network the pruning demos shrink.
"""

import numpy as np

from prunekit.data import generate_synthetic, holdout_split
from prunekit.model import build_toy_cnn, count_flops
from prunekit.reward import evaluate_accuracy, finetune


def main():
    data = generate_synthetic(n_per_class=120, num_classes=10, image_size=16,
                              noise=0.4, seed=0)
    train, rest = holdout_split(data, 0.4, seed=1)
    val, test = holdout_split(rest, 0.5, seed=2)
    print(f"dataset: {len(train)} train / {len(val)} val / {len(test)} test")

    net = build_toy_cnn([16, 16, 32], num_classes=10, input_shape=(1, 16, 16), seed=3)
    flops = count_flops(net)
    print(f"model: widths [16, 16, 32], {net.num_params()} params, "
          f"{flops.total_flops:,} FLOPs per image\n")

    for epoch in range(8):
        finetune(net, train, epochs=1, lr=0.01, batch_size=32, seed=100 + epoch)
        acc = evaluate_accuracy(net, val)
        print(f"epoch {epoch + 1}: val accuracy {acc:6.2f}%")

    print(f"\nfinal: val {evaluate_accuracy(net, val):.2f}%  "
          f"test {evaluate_accuracy(net, test):.2f}%")
    per_layer = ", ".join(f"{name}={f:,}" for name, f, _ in flops.rows if f)
    print(f"FLOPs by layer: {per_layer}")


if __name__ == "__main__":
    main()
