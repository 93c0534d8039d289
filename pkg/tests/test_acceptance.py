"""Acceptance suite: every shipped guarantee, checked at its stated tolerance,
one printed verdict line per criterion (run with -s to see them all).

The end-to-end run (criterion 6) is session scoped and shared with the
baseline comparison (criterion 7).
"""

import copy
import json
import os
import time

import numpy as np
import pytest

from prunekit import engine
from prunekit.agent import build_agent, log_prob_grad, sample_actions
from prunekit.cli import build_dataset, load_config, main
from prunekit.data import generate_synthetic, holdout_split
from prunekit.model import build_toy_cnn, count_flops, load_checkpoint
from prunekit.pipeline import PruneReport, PruneRunConfig, keep_counts_from_report, \
    prune_random_baseline
from prunekit.reinforce import derive_seed, normalize_rewards, train_agent_one_layer
from prunekit.reward import RewardConfig, accuracy_term, efficiency_term, \
    evaluate_accuracy, finetune
from prunekit.surgery import ActionVector, apply_action, plant_duplicate_filters, \
    zero_masked_clone

from oracles import fd_grad, rel_err

FD_TOL = 1e-4


def verdict(n, ok, detail):
    print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {n} failed: {detail}"


def fd_worst(build_loss, params, rng, max_coords=4):
    """Max relative disagreement between backward grads and central
    differences over a sample of coordinates of each parameter."""
    loss = build_loss()
    for p in params:
        p.zero_grad()
    loss.backward()
    worst = 0.0
    for p in params:
        n = p.data.size
        coords = list(range(n)) if n <= max_coords \
            else sorted(rng.choice(n, max_coords, replace=False))
        fd = fd_grad(lambda: float(build_loss().data), p.data, coords=coords)
        ad = p.grad.reshape(-1)[coords]
        worst = max(worst, rel_err(ad, fd))
    return worst


# ---------------------------------------------------------------------------
# criterion 1: finite-difference gradient correctness
# ---------------------------------------------------------------------------

def op_level_checks(seed):
    rng = np.random.default_rng(seed)
    worst = 0.0

    x = engine.parameter(rng.standard_normal((3, 4)))
    y = engine.parameter(rng.standard_normal(4))
    worst = max(worst, fd_worst(
        lambda: engine.sum_all(engine.mul(engine.add(x, y), engine.scale(x, 1.7))),
        [x, y], rng))

    z = engine.parameter(rng.uniform(0.1, 1.2, (2, 5)) * rng.choice([-1.0, 1.0], (2, 5)))
    worst = max(worst, fd_worst(
        lambda: engine.sum_all(engine.sigmoid(engine.relu(z))), [z], rng))

    c = engine.parameter(np.concatenate([rng.uniform(0.05, 0.4, 4), rng.uniform(0.6, 1.5, 4)]))
    worst = max(worst, fd_worst(
        lambda: engine.sum_all(engine.clamp(c, -0.5, 0.5)), [c], rng))

    r = engine.parameter(rng.standard_normal((2, 3, 2, 2)))
    rm = engine.constant(rng.standard_normal((2, 12)))
    worst = max(worst, fd_worst(
        lambda: engine.sum_all(engine.mul(engine.flatten(r), rm)), [r], rng))
    worst = max(worst, fd_worst(
        lambda: engine.sum_all(engine.reshape(r, (6, 4))), [r], rng))

    lx = engine.parameter(rng.standard_normal((3, 5)))
    lw = engine.parameter(rng.standard_normal((2, 5)))
    lb = engine.parameter(rng.standard_normal(2))
    lm = engine.constant(rng.standard_normal((3, 2)))
    worst = max(worst, fd_worst(
        lambda: engine.sum_all(engine.mul(engine.linear(lx, lw, lb), lm)), [lx, lw, lb], rng))

    stride, pad = (1, 1) if seed % 2 == 0 else (2, 0)
    cx = engine.parameter(rng.standard_normal((2, 2, 5, 5)))
    cw = engine.parameter(rng.standard_normal((3, 2, 3, 3)))
    cb = engine.parameter(rng.standard_normal(3))
    cm_shape = engine.conv2d(cx, cw, cb, stride, pad).data.shape
    cm = engine.constant(rng.standard_normal(cm_shape))
    worst = max(worst, fd_worst(
        lambda: engine.sum_all(engine.mul(engine.conv2d(cx, cw, cb, stride, pad), cm)),
        [cx, cw, cb], rng))

    base = rng.permutation(np.linspace(-2.0, 2.0, 2 * 2 * 6 * 6)).reshape(2, 2, 6, 6)
    px = engine.parameter(base)
    pm = engine.constant(rng.standard_normal((2, 2, 3, 3)))
    worst = max(worst, fd_worst(
        lambda: engine.sum_all(engine.mul(engine.maxpool2x2(px), pm)), [px], rng))

    sl = engine.parameter(rng.standard_normal((4, 3)))
    labels = rng.integers(0, 3, 4)
    worst = max(worst, fd_worst(
        lambda: engine.softmax_cross_entropy(sl, labels), [sl], rng))

    bp = engine.parameter(rng.uniform(0.15, 0.85, 5))
    acts = rng.integers(0, 2, (3, 5))
    worst = max(worst, fd_worst(
        lambda: engine.sum_all(engine.bernoulli_log_prob(bp, acts)), [bp], rng))
    return worst


def composed_checks(seed):
    rng = np.random.default_rng(seed + 1000)
    if seed % 2 == 0:
        net = build_toy_cnn([4, 5], num_classes=3, input_shape=(1, 8, 8), seed=seed)
    else:
        net = build_toy_cnn([4, 4], num_classes=3, input_shape=(1, 8, 8), seed=seed,
                            residual=True, coupled_blocks=True)
    x = rng.standard_normal((3, 1, 8, 8))
    labels = rng.integers(0, 3, 3)
    params = [p for _, p in net.parameters()]
    worst = fd_worst(lambda: engine.softmax_cross_entropy(net.forward(x), labels),
                     params, rng, max_coords=3)

    if seed % 2 == 0:
        agent = build_agent(4, 1, 2, 2, seed=seed, fc_hidden=8)
        w = rng.standard_normal((4, 1, 2, 2))
    else:
        agent = build_agent(5, 2, 3, 3, seed=seed, conv_widths=(4, 4), fc_hidden=8)
        w = rng.standard_normal((5, 2, 3, 3))
    with engine.no_grad():
        p = agent.probabilities(w).data
    assert (p > 2e-6).all() and (p < 1 - 2e-6).all()
    action = sample_actions(agent, w, 1, seed=seed)[0]
    aparams = [p for _, p in agent.store.items()]
    worst = max(worst, fd_worst(
        lambda: engine.sum_all(engine.bernoulli_log_prob(
            agent.probabilities(w), action.bits[None, :])),
        aparams, rng, max_coords=3))
    return worst


def test_criterion_1():
    t0 = time.time()
    worst = 0.0
    for seed in range(20):
        worst = max(worst, op_level_checks(seed))
        worst = max(worst, composed_checks(seed))
    elapsed = time.time() - t0
    verdict(1, worst < FD_TOL and elapsed < 120,
            f"20 seeds x (14 ops + composed CNN/agent), worst rel err {worst:.2e} "
            f"vs {FD_TOL:.0e}, {elapsed:.1f}s vs 120s")


# ---------------------------------------------------------------------------
# criterion 2: surgery equals zero-masking
# ---------------------------------------------------------------------------

def test_criterion_2():
    t0 = time.time()
    variants = [
        dict(widths=[4, 6], input_shape=(1, 8, 8), kernel_size=3),
        dict(widths=[6, 5], input_shape=(2, 10, 10), kernel_size=5),
        dict(widths=[5, 6, 4], input_shape=(1, 12, 12), kernel_size=3),
        dict(widths=[4, 4], input_shape=(1, 8, 8), kernel_size=3, residual=True),
        dict(widths=[4, 4, 6, 6], input_shape=(1, 12, 12), kernel_size=3,
             residual=True, coupled_blocks=True),
    ]
    pairs, boundary, residual_pairs, worst = 0, 0, 0, 0.0
    for seed in range(55):
        spec = variants[seed % len(variants)]
        net = build_toy_cnn(num_classes=3, seed=seed, **spec)
        rng = np.random.default_rng(seed + 500)
        prunable = [s.index for s in net.prunable_sites()]
        site = prunable[-1] if seed % 3 == 0 else int(rng.choice(prunable))
        n = net.conv_sites()[site].n_filters
        bits = rng.integers(0, 2, n)
        if not bits.any():
            bits[int(rng.integers(n))] = 1
        if bits.all():
            bits[int(rng.integers(n))] = 0
        action = ActionVector(site, bits)
        x = rng.standard_normal((4,) + tuple(spec["input_shape"]))
        pruned = apply_action(net, action)
        masked = zero_masked_clone(net, action)
        delta = float(np.abs(pruned.logits(x) - masked.logits(x)).max())
        worst = max(worst, delta)
        pairs += 1
        if site == net.conv_sites()[-1].index:
            boundary += 1
        if spec.get("residual"):
            residual_pairs += 1
    elapsed = time.time() - t0
    verdict(2, pairs >= 50 and boundary > 0 and residual_pairs > 0
            and worst < 1e-9 and elapsed < 60,
            f"{pairs} pairs ({boundary} at the conv-to-dense boundary, "
            f"{residual_pairs} residual), max |delta| {worst:.2e} vs 1e-9, "
            f"{elapsed:.1f}s vs 60s")


# ---------------------------------------------------------------------------
# criterion 3: reward fixtures and normalization bounds
# ---------------------------------------------------------------------------

def test_criterion_3():
    cfg = RewardConfig(drop_bound=2.0, baseline_perf=92.77)
    checks = [
        accuracy_term(92.77, cfg) == 1.0,
        accuracy_term(90.77, cfg) == 0.0,
        accuracy_term(88.77, cfg) == -1.0,
        efficiency_term(64, 64) == 0.0,
        efficiency_term(64, 16) == float(np.log(4.0)),
        efficiency_term(64, 1) == float(np.log(64.0)),
    ]
    worst_mean, worst_std = 0.0, 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        r = rng.standard_normal(5) * rng.uniform(0.5, 50.0)
        normed = np.array(normalize_rewards(list(r)))
        worst_mean = max(worst_mean, abs(float(normed.mean())))
        worst_std = max(worst_std, abs(float(normed.std()) - 1.0))
    checks.append(worst_mean < 1e-9)
    checks.append(worst_std < 1e-9)
    checks.append(normalize_rewards([7.0, 7.0, 7.0]) == [0.0, 0.0, 0.0])
    verdict(3, all(checks),
            f"6 closed-form fixtures exact, normalization |mean| {worst_mean:.1e} "
            f"and |std-1| {worst_std:.1e} vs 1e-9")


# ---------------------------------------------------------------------------
# criterion 4: REINFORCE estimator is unbiased
# ---------------------------------------------------------------------------

def test_criterion_4():
    from reinforce_oracle import enumerate_expected_gradient, mc_gradient_samples
    t0 = time.time()
    agent = build_agent(3, 1, 2, 2, seed=5, fc_hidden=6)
    w = np.random.default_rng(6).standard_normal((3, 1, 2, 2))

    def reward_fn(bits):
        return float(np.log(3.0 / bits.sum()))

    exact, _ = enumerate_expected_gradient(agent, w, reward_fn, m_rollouts=5)
    samples = mc_gradient_samples(agent, w, reward_fn, m_rollouts=5,
                                  epochs=10_000, seed=7)
    proj = np.random.default_rng(8).standard_normal(exact.size)
    proj /= np.linalg.norm(proj)
    s = samples @ proj
    se = s.std(ddof=1) / np.sqrt(len(s))
    z = abs(s.mean() - exact @ proj) / se
    coord_se = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
    coord_z = float((np.abs(samples.mean(axis=0) - exact) /
                     np.maximum(coord_se, 1e-15)).max())
    elapsed = time.time() - t0
    verdict(4, z <= 3.0 and coord_z <= 5.0 and elapsed < 300,
            f"10k epochs vs joint enumeration over the 2^3 action space: "
            f"projected z {z:.2f} vs 3.00, worst per-coordinate z {coord_z:.2f}, "
            f"{elapsed:.1f}s vs 300s")


# ---------------------------------------------------------------------------
# criterion 5: single-layer convergence trend on planted redundancy
# ---------------------------------------------------------------------------

def _planted_trend_ok(seed):
    data = generate_synthetic(n_per_class=24, num_classes=2, image_size=8,
                              noise=0.3, seed=derive_seed(seed, 50))
    train, val = holdout_split(data, 0.25, seed=derive_seed(seed, 51))
    net = build_toy_cnn([12, 8], num_classes=2, input_shape=(1, 8, 8), seed=seed)
    plant_duplicate_filters(net, 0.5)
    finetune(net, train, epochs=6, seed=derive_seed(seed, 52))
    cfg = RewardConfig(drop_bound=2.0, baseline_perf=evaluate_accuracy(net, val),
                       finetune_epochs=1, finetune_batch=8, finetune_subset=24,
                       eval_batch=64)
    _, log = train_agent_one_layer(net, 0, train, val, cfg, max_epochs=300,
                                   seed=seed, convergence_tol=0.0)
    ma_r = log.moving_average("mean_reward", 50)
    ma_k = log.moving_average("mean_kept", 50)
    return ma_r[299] > ma_r[49] and ma_k[299] < ma_k[49]


def test_criterion_5():
    t0 = time.time()
    results = [_planted_trend_ok(seed) for seed in range(5)]
    elapsed = time.time() - t0
    verdict(5, sum(results) >= 4 and elapsed < 600,
            f"300-epoch reward up + kept down on a 12-filter layer with 6 planted "
            f"duplicates: {sum(results)}/5 seeds (need >= 4), {elapsed:.1f}s vs 600s")


# ---------------------------------------------------------------------------
# criteria 6 and 7: end-to-end pruning and the random baseline
# ---------------------------------------------------------------------------

E2E_CONFIG = {
    "seed": 0,
    "data": {"kind": "synthetic", "n_per_class": 160, "num_classes": 10,
             "image_size": 16, "noise": 0.4, "val_fraction": 0.3, "test_fraction": 0.3},
    "model": {"widths": [16, 16, 32], "plant_duplicates": 0.5},
    "train": {"epochs": 12, "lr": 0.01, "batch_size": 32},
    "prune": {"post_finetune_epochs": 4},
}


@pytest.fixture(scope="session")
def e2e_run(tmp_path_factory):
    ws = tmp_path_factory.mktemp("e2e")
    cfg = copy.deepcopy(E2E_CONFIG)
    cfg["out_dir"] = str(ws / "runs")
    cfg_path = str(ws / "config.json")
    with open(cfg_path, "w") as fh:
        json.dump(cfg, fh)
    t0 = time.time()
    rc_train = main(["train-baseline", "--config", cfg_path])
    rc_prune = main(["prune", "--all", "--bound", "2", "--config", cfg_path])
    elapsed = time.time() - t0
    out = cfg["out_dir"]
    return {
        "config_path": cfg_path,
        "out": out,
        "rc": (rc_train, rc_prune),
        "elapsed": elapsed,
        "baseline": json.load(open(os.path.join(out, "baseline_report_seed0.json"))),
        "report": json.load(open(os.path.join(out, "report_learned_seed0.json"))),
    }


def test_criterion_6(e2e_run):
    rep = e2e_run["report"]
    baseline_ok = e2e_run["rc"] == (0, 0) and e2e_run["baseline"]["val_accuracy"] >= 90.0
    pruned = load_checkpoint(os.path.join(e2e_run["out"], "pruned_learned_seed0.ckpt"))
    base = load_checkpoint(os.path.join(e2e_run["out"], "baseline.ckpt"))
    flops_after = count_flops(pruned).total_flops
    flops_before = count_flops(base).total_flops
    pct = 100.0 * (1 - flops_after / flops_before)
    flops_ok = (rep["flops_after"] == flops_after and rep["flops_before"] == flops_before
                and abs(rep["saved_flops_pct"] - pct) <= 1e-12 * abs(pct))
    ok = (baseline_ok and rep["filter_ratio_pct"] >= 25.0 and rep["val_drop"] <= 2.0
          and flops_ok and e2e_run["elapsed"] < 1800)
    verdict(6, ok,
            f"baseline val {e2e_run['baseline']['val_accuracy']:.2f}% (need >= 90), "
            f"filters removed {rep['filter_ratio_pct']:.1f}% (need >= 25), "
            f"val drop {rep['val_drop']:.2f} (bound 2), saved FLOPs "
            f"{rep['saved_flops_pct']:.2f}% consistent to 1e-12, "
            f"{e2e_run['elapsed']:.0f}s vs 1800s")


def test_criterion_7(e2e_run):
    cfg = load_config(e2e_run["config_path"])
    train, val, test = build_dataset(cfg)
    base = load_checkpoint(os.path.join(e2e_run["out"], "baseline.ckpt"))
    counts = keep_counts_from_report(
        PruneReport.from_json(os.path.join(e2e_run["out"], "report_learned_seed0.json")))
    p = cfg["prune"]
    run_cfg = PruneRunConfig(drop_bound=2.0, finetune_lr=p["finetune_lr"],
                             finetune_batch=p["finetune_batch"],
                             post_finetune_epochs=p["post_finetune_epochs"],
                             seed=cfg["seed"])
    random_accs = []
    for s in range(5):
        _, rep = prune_random_baseline(base, counts, derive_seed(900, s), train, val,
                                       run_cfg, test)
        random_accs.append(rep.test_after)
    learned = e2e_run["report"]["test_after"]
    mean_random = float(np.mean(random_accs))
    inversions = sum(1 for acc in random_accs if acc > learned)
    flag = " [re-run flag: ordering inverted in >1 repetition]" if inversions > 1 else ""
    verdict(7, learned >= mean_random,
            f"matched ratios, same data: learned test {learned:.2f}% vs random mean "
            f"{mean_random:.2f}% over 5 seeds ({inversions} single-seed inversions){flag}")


# ---------------------------------------------------------------------------
# criterion 8: bit-exact re-runs
# ---------------------------------------------------------------------------

def test_criterion_8(tmp_path):
    cfg = {
        "seed": 17,
        "out_dir": str(tmp_path / "runs"),
        "data": {"kind": "synthetic", "n_per_class": 18, "num_classes": 3,
                 "image_size": 8, "noise": 0.3, "val_fraction": 0.2, "test_fraction": 0.2},
        "model": {"widths": [5, 6], "plant_duplicates": 0.5},
        "train": {"epochs": 2, "batch_size": 16},
        "prune": {"bound": 4.0, "rollouts": 4, "max_epochs": 12, "finetune_subset": 24,
                  "finetune_batch": 8, "eval_batch": 64, "post_finetune_epochs": 1},
    }
    cfg_path = str(tmp_path / "config.json")
    with open(cfg_path, "w") as fh:
        json.dump(cfg, fh)

    def run_all():
        assert main(["train-baseline", "--config", cfg_path]) == 0
        assert main(["prune", "--all", "--config", cfg_path]) == 0
        assert main(["prune", "--all", "--config", cfg_path, "--method", "random",
                     "--keep-counts", "3,4"]) == 0

    run_all()
    out = cfg["out_dir"]
    first = {name: open(os.path.join(out, name), "rb").read()
             for name in sorted(os.listdir(out))}
    run_all()
    second = {name: open(os.path.join(out, name), "rb").read()
              for name in sorted(os.listdir(out))}
    same_names = sorted(first) == sorted(second)
    diffs = [name for name in first if second.get(name) != first[name]]
    verdict(8, same_names and not diffs,
            f"train-baseline + learned prune + random prune re-run: "
            f"{len(first)} artifacts byte-identical"
            + (f"; differing: {diffs}" if diffs else ""))
