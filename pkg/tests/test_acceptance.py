"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (also repeated in the
terminal summary) before asserting, so a run shows every outcome.
"""

import itertools
import math
import time

import numpy as np
import pytest

import conftest
from imcswav import autodiff as ad
from imcswav.data import gen_synthetic, make_views
from imcswav.metrics import clustering_accuracy, hungarian
from imcswav.network import load_checkpoint
from imcswav.objectives import mi_cluster_loss, swap_loss, total_loss
from imcswav.selflabel import marginal_residual, sinkhorn_targets
from imcswav.trainer import TrainConfig, Trainer, forward_views, freeze, train

from fd import check_op, numeric_grad, rel_err
from test_autodiff import OPS
from test_objectives import make_bundle, naive_mi, naive_swap, random_instance, random_simplex


def report(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}: {detail}"
    print(line)
    conftest.ACCEPTANCE_LINES.append(line)
    assert passed, line


def param_bytes(model):
    return {k: p.data.tobytes() for k, p in model.named_parameters().items()}


TOY = dict(n=40, input_dim=8, k_true=3, hidden=(6,), embedding_dim=8, projection_dim=5, classifier_hidden=5,
           n_prototypes=6, n_high=2, n_low=2, batch_size=4)


@pytest.fixture(scope="module")
def end_to_end():
    start = time.perf_counter()
    runs = {seed: train(TrainConfig(seed=seed)) for seed in (0, 1, 2)}
    return runs, time.perf_counter() - start


def test_c01_sinkhorn_balance():
    rng = np.random.default_rng(0)
    mats = [rng.uniform(-1, 1, (64, 16)) for _ in range(100)]
    start = time.perf_counter()
    long = [marginal_residual(sinkhorn_targets(s, 0.05, 200)) for s in mats]
    elapsed = time.perf_counter() - start
    short = [marginal_residual(sinkhorn_targets(s, 0.05, 3)) for s in mats]
    worst = max(max(r) for r in long)
    short_ok = all(np.isfinite(r).all() for r in np.array(short))
    print(f"3-iteration residuals: row max {max(r[0] for r in short):.3e}, col max {max(r[1] for r in short):.3e}")
    report(1, "Sinkhorn balance", worst < 1e-6 and short_ok and elapsed < 1.0,
           f"max residual {worst:.2e} at 200 iters, {elapsed:.3f}s")


def test_c02_gradient_integrity():
    start = time.perf_counter()
    op_worst = 0.0
    for name, (op, shapes, positive) in OPS.items():
        for seed in range(50):
            op_worst = max(op_worst, check_op(op, *shapes, rng=np.random.default_rng(seed), positive=positive))
    cfg = TrainConfig(**TOY)
    x, _ = gen_synthetic(cfg.dataset_spec)
    comp_worst = 0.0
    for seed in range(50):
        trainer = Trainer(TrainConfig(**TOY, seed=seed), x)
        model = trainer.model
        views = make_views(x[:4], cfg.view_config, seed).views
        frozen = freeze(views, model, cfg)
        loss = total_loss(forward_views(views, model, cfg, frozen), cfg.beta, cfg.alpha, cfg.logit_threshold)
        ad.backward(loss.tensor)

        def f():
            with ad.no_grad():
                b = forward_views(views, model, cfg, frozen)
                return total_loss(b, cfg.beta, cfg.alpha, cfg.logit_threshold).total

        for p in model.named_parameters().values():
            comp_worst = max(comp_worst, rel_err(p.grad, numeric_grad(f, p.data)))
    elapsed = time.perf_counter() - start
    report(2, "gradient integrity", op_worst < 1e-4 and comp_worst < 1e-4 and elapsed < 30,
           f"ops max rel err {op_worst:.2e}, composite {comp_worst:.2e}, {elapsed:.1f}s")


def test_c03_analytic_losses():
    beta = 4.0
    errs = []
    for k in (2, 3, 5):
        onehot = np.eye(k)[np.arange(3 * k) % k]
        errs.append(abs(mi_cluster_loss(make_bundle([onehot], [], [onehot]), beta).item() + beta * math.log(k)))
        u = random_simplex(np.random.default_rng(k), 3 * k, 7)
        uni = np.full((3 * k, k), 1.0 / k)
        errs.append(abs(mi_cluster_loss(make_bundle([u], [], [uni]), beta).item() - (1 - beta) * math.log(k)))
    for kp in (4, 16, 64):
        u = np.full((5, kp), 1.0 / kp)
        rng = np.random.default_rng(kp)
        b = make_bundle([u] * 4, [random_simplex(rng, 5, kp), random_simplex(rng, 5, kp)], [u] * 4)
        errs.append(abs(swap_loss(b).item() - math.log(kp)))
    report(3, "analytic loss values", max(errs) < 1e-9, f"max abs err {max(errs):.2e}")


def test_c04_oracle_equivalence():
    rng = np.random.default_rng(0)
    loss_err = 0.0
    for _ in range(100):
        V, m, k, kp = int(rng.integers(2, 6)), int(rng.integers(2, 8)), int(rng.integers(2, 5)), int(rng.integers(2, 8))
        codes, targets, posts = random_instance(rng, V, 2, m, k, kp)
        b = make_bundle(codes, targets, posts)
        beta = float(rng.uniform(0, 8))
        loss_err = max(loss_err, abs(swap_loss(b).item() - naive_swap(codes, targets)),
                       abs(mi_cluster_loss(b, beta).item() - naive_mi(codes, posts, beta)))
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(1, 7))
        n = int(rng.integers(k, 60))
        truth = rng.integers(0, k, n)
        pred = np.where(rng.random(n) < 0.5, truth, rng.integers(0, k, n))
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (pred, truth), 1)
        brute = max(sum(counts[i, p[i]] for i in range(k)) for p in itertools.permutations(range(k)))
        perm = hungarian(-counts)
        mismatches += counts[np.arange(k), perm].sum() != brute
        mismatches += clustering_accuracy(pred, truth) != brute / n
    report(4, "oracle equivalence", loss_err <= 1e-12 and mismatches == 0,
           f"loss max abs err {loss_err:.2e}, hungarian/ACC mismatches {mismatches}/1000")


def test_c05_detach_contract():
    cfg = TrainConfig(**TOY)
    x, _ = gen_synthetic(cfg.dataset_spec)
    leaks = []
    for seed in range(20):
        model = Trainer(TrainConfig(**TOY, seed=seed), x).model
        views = make_views(x[:4], cfg.view_config, seed).views
        ad.backward(mi_cluster_loss(forward_views(views, model, cfg), cfg.beta))
        for name, p in model.named_parameters().items():
            if not name.startswith("classifier") and p.grad is not None and np.any(p.grad != 0):
                leaks.append((seed, name))
    report(5, "detach contract", not leaks, f"{len(leaks)} non-zero encoder/projection/prototype gradients")


@pytest.mark.slow
def test_c06_end_to_end(end_to_end):
    runs, elapsed = end_to_end
    vals = {s: r.val_metrics for s, r in runs.items()}
    ok = all(v["acc"] >= 0.95 and v["nmi"] >= 0.85 and v["ari"] >= 0.85 for v in vals.values())
    detail = "; ".join(f"seed {s}: acc {v['acc']:.4f} nmi {v['nmi']:.4f} ari {v['ari']:.4f}" for s, v in vals.items())
    report(6, "end-to-end clustering", ok and elapsed < 300, f"{detail}; {elapsed:.0f}s")


@pytest.mark.slow
def test_c07_multicrop_ablation():
    accs = {}
    for n_low in (4, 0):
        accs[n_low] = [train(TrainConfig(separation=4.0, n_low=n_low, seed=s)).val_metrics["acc"] for s in range(5)]
    with_low, without = np.mean(accs[4]), np.mean(accs[0])
    report(7, "multi-crop ablation", with_low >= without,
           f"mean ACC n_low=4 {with_low:.4f} vs n_low=0 {without:.4f}")


@pytest.mark.slow
def test_c08_jsd_diagnostic(end_to_end):
    runs, _ = end_to_end
    ok, parts = True, []
    for s, r in runs.items():
        same, cross = r.val_metrics["jsd_same"], r.val_metrics["jsd_cross"]
        ok &= 0 <= same <= math.log(2) and 0 <= cross <= math.log(2) and cross - same > 0.1
        parts.append(f"seed {s}: same {same:.4f} cross {cross:.4f}")
    report(8, "JSD diagnostic", ok, "; ".join(parts))


@pytest.mark.slow
def test_c09_prototype_count_robustness(end_to_end):
    runs, _ = end_to_end
    spreads = []
    for s in runs:
        accs = [runs[s].val_metrics["acc"]]
        accs += [train(TrainConfig(n_prototypes=kp, seed=s)).val_metrics["acc"] for kp in (32, 128)]
        spreads.append(max(accs) - min(accs))
    report(9, "robustness to k'", max(spreads) < 0.05,
           "ACC spread over k' in {32, 64, 128} per seed: " + ", ".join(f"{d:.4f}" for d in spreads))


def test_c10_determinism_and_persistence(tmp_path):
    cfg = TrainConfig(epochs=2, seed=11)
    a, b = train(cfg), train(cfg)
    reproducible = param_bytes(a.model) == param_bytes(b.model)

    x, _ = gen_synthetic(TrainConfig().dataset_spec)
    base = TrainConfig()
    t = Trainer(base, x)
    for _ in range(3):
        t.step()
    t.save(tmp_path / "c.imcs")
    ck = load_checkpoint(tmp_path / "c.imcs", expected_hash=base.digest())
    round_trip = param_bytes(ck.model) == param_bytes(t.model) and all(
        ck.state.m[k].tobytes() == t.state.m[k].tobytes() and ck.state.v[k].tobytes() == t.state.v[k].tobytes()
        for k in t.state.m)
    for _ in range(5):
        t.step()
    resumed = Trainer.resume(tmp_path / "c.imcs", base, x)
    for _ in range(5):
        resumed.step()
    resume_ok = param_bytes(resumed.model) == param_bytes(t.model)
    report(10, "determinism and persistence", reproducible and round_trip and resume_ok,
           f"rerun bitwise {reproducible}, checkpoint round trip {round_trip}, 5-step resume {resume_ok}")
