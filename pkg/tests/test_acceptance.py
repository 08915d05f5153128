"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the criterion lines are
printed even without ``-s``.
"""

import math
import time

import numpy as np
import pytest
import torch

from conftest import finite_difference_check, randomize_
from fusionbench.data import GeneratorSpec, SplitSpec, generate
from fusionbench.fusion import ARCHITECTURES, ArityError, FusionConfig, FusionModel
from fusionbench.harness import format_cell
from fusionbench.hpo import (
    LogUniform,
    MedianPruner,
    NopPruner,
    RandomSampler,
    SearchSpace,
    TPESampler,
    TrialPruned,
    run_study,
    sample_independent,
)
from fusionbench.logit_fusion import EvidenceOpinion, dempster_combine
from fusionbench.metrics import accuracy, auprc, macro_f1, mse
from fusionbench.training import RunResult, TrainConfig, aggregate_runs, run_protocol


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail, elapsed):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({elapsed:.1f}s) {detail}")
        assert ok, detail
    return emit


def test_criterion_1_search_space(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    space = SearchSpace.default()
    draws = [sample_independent(space, rng) for _ in range(100_000)]
    lr = np.array([d["lr"] for d in draws])
    wd = np.array([d["weight_decay"] for d in draws])
    opts = {d["optimizer"] for d in draws}
    res = run_study(lambda t: -abs(math.log10(t.params["lr"]) + 4), space)
    ok = (1e-5 <= lr.min() and lr.max() <= 1e-3 and 1e-6 <= wd.min() and wd.max() <= 1e-2
          and opts == {"adamw", "rmsprop", "adam"} and len(res.trials) == 10)
    elapsed = time.perf_counter() - t0
    verdict(1, ok and elapsed < 60,
            f"lr [{lr.min():.3g}, {lr.max():.3g}] wd [{wd.min():.3g}, {wd.max():.3g}] "
            f"optimizers {sorted(opts)}, default study ran {len(res.trials)} trials", elapsed)


def test_criterion_2_evidential_algebra(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = dict(identity=0.0, commute=0.0, assoc=0.0, norm=0.0)
    u_ok = True
    for _ in range(1000):
        K = int(rng.integers(2, 7))
        o1, o2, o3 = (EvidenceOpinion(1 + rng.gamma(0.7, 3.0, K)) for _ in range(3))
        vac = EvidenceOpinion.vacuous(K)
        rel = lambda a, b: float(np.max(np.abs(a - b) / np.abs(b)))  # noqa: E731
        worst["identity"] = max(worst["identity"], rel(dempster_combine(o1, vac).alpha, o1.alpha),
                                rel(dempster_combine(vac, o1).alpha, o1.alpha))
        ab = dempster_combine(o1, o2)
        worst["commute"] = max(worst["commute"], rel(dempster_combine(o2, o1).alpha, ab.alpha))
        worst["assoc"] = max(worst["assoc"], rel(dempster_combine(ab, o3).alpha,
                                                 dempster_combine(o1, dempster_combine(o2, o3)).alpha))
        worst["norm"] = max(worst["norm"], abs(ab.belief.sum() + ab.uncertainty - 1))
        u_ok &= bool(ab.uncertainty <= min(o1.uncertainty, o2.uncertainty))
    hand = dempster_combine(EvidenceOpinion(np.array([3.0, 1.0])), EvidenceOpinion(np.array([1.0, 3.0])))
    hand_err = float(np.max(np.abs(hand.alpha - 3.0)))
    elapsed = time.perf_counter() - t0
    ok = (worst["identity"] <= 1e-12 and worst["commute"] <= 1e-9 and worst["assoc"] <= 1e-9
          and worst["norm"] <= 1e-9 and u_ok and hand_err <= 1e-9 and elapsed < 10)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, ok, f"1000 instances: {detail}, u<=min {u_ok}, (3,1)+(1,3) err {hand_err:.1e}", elapsed)


FEATURE_SHAPES = {"multi_to_one": lambda d, k: d, "one_to_multi": lambda d, k: k * d,
                  "caf": lambda d, k: 2 * d, "cacf": lambda d, k: d, "concat": lambda d, k: k * d}


def test_criterion_3_shapes_and_traces(verdict):
    t0 = time.perf_counter()
    failures = []
    shape_sets = {1: [(5, 6)], 2: [(5, 6), (3, 4)], 3: [(5, 6), (3, 4), (7, 2)]}
    for arch, width in FEATURE_SHAPES.items():
        for k, shapes in shape_sets.items():
            if arch in ("caf", "cacf") and k != 2:
                try:
                    FusionModel(FusionConfig.small(arch, 3, d_model=16, n_heads=2), shapes)
                    failures.append(f"{arch} accepted {k} modalities")
                except ArityError:
                    pass
                continue
            m = FusionModel(FusionConfig.small(arch, 3, d_model=16, n_heads=2), shapes, seed=0).eval()
            for B in range(1, 9):
                xs = [torch.randn(B, L, D) for L, D in shapes]
                g, logits = m.represent(xs), m(xs)
                if g.shape != (B, width(16, k)) or logits.shape != (B, 3):
                    failures.append(f"{arch} k={k} B={B}: g {tuple(g.shape)}")
            if arch == "cacf":
                n = m.fuser.joint_sequence(xs).values.shape[1]
                if n != 1 + 2 * (5 + 1) + 2 * (3 + 1):
                    failures.append(f"cacf joint length {n}")

    # degenerate traces with identity encoders
    shapes = [(5, 6), (3, 4)]
    xs = [torch.randn(4, L, D) for L, D in shapes]
    m = FusionModel(FusionConfig.small("multi_to_one", 3, d_model=16, n_heads=2, modality_layers=0,
                                       fusion_layers=0), shapes, seed=0)
    if not torch.equal(m.represent(xs), m.fuser.cls.cls.expand(4, 16)):
        failures.append("multi_to_one identity trace")
    m = FusionModel(FusionConfig.small("one_to_multi", 3, d_model=16, n_heads=2, fusion_layers=0), shapes, seed=0)
    for h, proj, x in zip(m.fuser.segments(xs), m.fuser.proj, xs):
        if not torch.equal(h, proj(x).values):
            failures.append("one_to_multi shared identity trace")
    m = FusionModel(FusionConfig.small("concat", 3, d_model=16, n_heads=2), shapes, seed=0)
    pooled = torch.cat([p(x).values.mean(1) for p, x in zip(m.fuser.proj, xs)], 1)
    if not torch.equal(m.represent(xs), pooled):
        failures.append("concat pooling trace")
    elapsed = time.perf_counter() - t0
    verdict(3, not failures and elapsed < 60,
            "; ".join(failures) or "5 architectures x k in {1,2,3} x B 1..8, traces exact, arity errors raised",
            elapsed)


def test_criterion_4_gradient_checks(verdict):
    t0 = time.perf_counter()
    worst_by_arch, total, covered = {}, 0, 0
    shapes = [(3, 3), (2, 4)]
    y = torch.tensor([0, 2, 1])
    for i, arch in enumerate(ARCHITECTURES):
        cfg = FusionConfig.small(arch, 3, d_model=8, n_heads=2, max_seq_len=16)
        m = randomize_(FusionModel(cfg, shapes, seed=i).double(), std=0.4, seed=i)
        gen = torch.Generator().manual_seed(i)
        xs = [torch.randn(3, L, D, generator=gen, dtype=torch.float64) for L, D in shapes]
        params = list(m.parameters())
        worst, count = finite_difference_check(params, lambda: m.loss(xs, y), step=1e-5)
        worst_by_arch[arch] = worst
        total += sum(p.numel() for p in params)
        covered += count
    elapsed = time.perf_counter() - t0
    ok = covered == total and max(worst_by_arch.values()) < 1e-3 and elapsed < 300
    detail = ", ".join(f"{a} {w:.1e}" for a, w in worst_by_arch.items())
    verdict(4, ok, f"{covered}/{total} parameters, worst rel err: {detail}", elapsed)


def test_criterion_5_protocol(verdict):
    t0 = time.perf_counter()
    ds = generate(GeneratorSpec(200, 2, [("a", 4, 3), ("b", 3, 2)], redundancy=1.0, seed=0))
    rec = run_protocol(FusionConfig.small("concat", 2, d_model=8, n_heads=2), ds,
                       TrainConfig(epochs=2, seed=7), SplitSpec())
    agg = aggregate_runs([RunResult(i, test_metrics={"accuracy": v}) for i, v in enumerate((1.0, 2.0, 3.0))])
    std_err = abs(agg["accuracy"][1] - math.sqrt(2 / 3))
    cell = format_cell("accuracy", 0.7850, 0.0123)
    ok = (len(rec.per_seed) == 3 and rec.seeds == [7, 8, 9] and rec.aggregate == aggregate_runs(rec.per_seed)
          and std_err <= 1e-12 and cell == "78.50 (1.23)")
    elapsed = time.perf_counter() - t0
    verdict(5, ok and elapsed < 10,
            f"seeds {rec.seeds}, pop std err {std_err:.1e}, cell {cell!r}", elapsed)


@pytest.mark.slow
def test_criterion_6_redundancy_finding(verdict):
    t0 = time.perf_counter()
    acc = {}
    for rho in (0.0, 0.9):
        ds = generate(GeneratorSpec(2000, 4, [("a", 8, 8), ("b", 8, 8)], redundancy=rho, seed=0))
        for arch in ("concat", "caf", "cacf"):
            rec = run_protocol(FusionConfig.small(arch, 4, d_model=16, n_heads=2), ds,
                               TrainConfig(lr=3e-3, epochs=30, seed=0), SplitSpec(mode="shuffled"))
            acc[(rho, arch)] = 100 * rec.aggregate["accuracy"][0]
    gains = {a: acc[(0.0, a)] - acc[(0.0, "concat")] for a in ("caf", "cacf")}
    gaps = {a: abs(acc[(0.9, a)] - acc[(0.9, "concat")]) for a in ("caf", "cacf")}
    elapsed = time.perf_counter() - t0
    ok = all(g >= 3.0 for g in gains.values()) and all(g <= 1.5 for g in gaps.values()) and elapsed < 1200
    table = ", ".join(f"rho={r:g} {a} {v:.2f}" for (r, a), v in acc.items())
    verdict(6, ok, f"{table}; gain at rho=0 {gains}, |gap| at rho=0.9 {gaps}", elapsed)


def test_criterion_7_hpo(verdict):
    t0 = time.perf_counter()
    space = SearchSpace({"lr": LogUniform(1e-5, 1e-3), "weight_decay": LogUniform(1e-6, 1e-2)})

    def log_quadratic(trial):
        p = trial.params
        return -(math.log(p["lr"]) - math.log(1e-4)) ** 2 - (math.log(p["weight_decay"]) - math.log(1e-4)) ** 2

    tpe = np.median([run_study(log_quadratic, space, 50, TPESampler(seed=s), NopPruner()).best_value
                     for s in range(20)])
    rnd = np.median([run_study(log_quadratic, space, 50, RandomSampler(seed=s), NopPruner()).best_value
                     for s in range(20)])

    def curves(counter, steps=20):
        def objective(trial):
            final = -(math.log(trial.params["lr"]) - math.log(1e-4)) ** 2
            for step in range(steps):
                counter[0] += 1
                trial.report(final * (1 - math.exp(-(step + 1) / 4)), step)
                if trial.should_prune():
                    raise TrialPruned()
            return final
        return objective

    pruned_steps, full_steps, same_best = [0], [0], True
    for s in range(5):
        a = run_study(curves(pruned_steps), SearchSpace.default(), 30, RandomSampler(seed=s), MedianPruner())
        b = run_study(curves(full_steps), SearchSpace.default(), 30, RandomSampler(seed=s), NopPruner())
        same_best &= a.best_trial == b.best_trial
    saving = 1 - pruned_steps[0] / full_steps[0]
    elapsed = time.perf_counter() - t0
    ok = tpe > rnd and saving >= 0.30 and same_best and elapsed < 300
    verdict(7, ok, f"median best TPE {tpe:.4f} vs random {rnd:.4f}; pruning saved {100 * saving:.0f}% "
                   f"of steps ({pruned_steps[0]}/{full_steps[0]}), best trial unchanged {same_best}", elapsed)


def _brute_f1(p, t):
    out = []
    for c in sorted(set(p) | set(t)):
        tp = sum(a == c and b == c for a, b in zip(p, t))
        fp = sum(a == c and b != c for a, b in zip(p, t))
        fn = sum(a != c and b == c for a, b in zip(p, t))
        out.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(out) / len(out)


def _brute_ap(s, y):
    total, prev, n_pos = 0.0, 0.0, sum(y)
    for thr in sorted(set(s), reverse=True):
        hits = [b for a, b in zip(s, y) if a >= thr]
        rec = sum(hits) / n_pos
        total += (rec - prev) * sum(hits) / len(hits)
        prev = rec
    return total


def test_criterion_8_metric_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    worst = dict(accuracy=0.0, macro_f1=0.0, auprc=0.0, mse=0.0)
    for _ in range(200):
        n, K = int(rng.integers(4, 50)), int(rng.integers(3, 6))
        t = rng.integers(0, K, n)
        p = rng.integers(0, K, n)
        s = rng.integers(0, 8, (n, K)) / 7.0
        present = [c for c in range(K) if (t == c).any()]
        ap = np.mean([_brute_ap(list(s[:, c]), list(t == c)) for c in present])
        a, b = rng.normal(size=n), rng.normal(size=n)
        worst["accuracy"] = max(worst["accuracy"], abs(accuracy(p, t) - sum(p == t) / n))
        worst["macro_f1"] = max(worst["macro_f1"], abs(macro_f1(p, t) - _brute_f1(list(p), list(t))))
        worst["auprc"] = max(worst["auprc"], abs(auprc(s, t) - ap))
        worst["mse"] = max(worst["mse"], abs(mse(a, b) - sum((x - z) ** 2 for x, z in zip(a, b)) / n))
    hand = macro_f1([1, 0, 0, 0], [1, 1, 0, 0])
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-9 and abs(hand - 11 / 15) <= 1e-12 and elapsed < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(8, ok, f"200 instances: {detail}; hand macro-F1 {hand:.4f}", elapsed)
