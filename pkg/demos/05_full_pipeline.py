"""End-to-end pruning run, with one-shot baselines for comparison.

Trains a small CNN with planted duplicate filters, prunes it layer by layer
with learned agents, then prunes fresh copies to the same per-layer keep
counts with magnitude (L1) ranking and with random selection. If the agents
learned anything layer-specific they should at least match the heuristics at
an identical budget.
"""

from prunekit.data import generate_synthetic, holdout_split
from prunekit.model import build_toy_cnn, count_flops
from prunekit.pipeline import (PruneRunConfig, keep_counts_from_report,
                               prune_l1_baseline, prune_network,
                               prune_random_baseline)
from prunekit.reward import evaluate_accuracy, finetune
from prunekit.surgery import plant_duplicate_filters


def main():
    full = generate_synthetic(n_per_class=40, num_classes=3, image_size=8,
                              noise=0.3, seed=60)
    rest, test = holdout_split(full, val_fraction=0.2, seed=61)
    train, val = holdout_split(rest, val_fraction=0.25, seed=61)

    net = build_toy_cnn([12, 10], num_classes=3, input_shape=(1, 8, 8), seed=62)
    plant_duplicate_filters(net, fraction=0.5)
    finetune(net, train, epochs=8, lr=0.01, batch_size=8, seed=63)
    p_star = evaluate_accuracy(net, val)
    print(f"baseline: {net.num_params()} params, "
          f"{count_flops(net).total_flops:,} FLOPs, val {p_star:.2f}%\n")

    cfg = PruneRunConfig(drop_bound=2.0, max_epochs=120, finetune_subset=32,
                         finetune_batch=8, eval_batch=64,
                         post_finetune_epochs=2, seed=64)
    pruned, learned, logs = prune_network(net, train, val, cfg, test)
    counts = keep_counts_from_report(learned)
    print(f"learned keep counts per site: {counts}")

    _, l1 = prune_l1_baseline(net, counts, train, val, cfg, test)
    _, rand = prune_random_baseline(net, counts, 65, train, val, cfg, test)

    print(f"\n{'method':<10} {'filters':>8} {'ratio %':>8} {'FLOPs saved %':>14} "
          f"{'val %':>7} {'drop':>6} {'test %':>7}")
    for rep in (learned, l1, rand):
        print(f"{rep.method:<10} {rep.filters_after:>8} {rep.filter_ratio_pct:>8.1f} "
              f"{rep.saved_flops_pct:>14.1f} {rep.val_after:>7.2f} "
              f"{rep.val_drop:>6.2f} {rep.test_after:>7.2f}")

    print("\nAll three rows remove the same number of filters per layer; only")
    print("the choice of which filters differs. The learned row picks by")
    print("trained agent, l1 keeps the largest-norm filters, random samples")
    print("a keep set uniformly.")


if __name__ == "__main__":
    main()
