"""Acceptance suite. Each criterion prints one ``PASS``/``FAIL`` line.

Run with ``pytest tests/test_acceptance.py -v -s`` or ``python tests/test_acceptance.py``.

Criteria 5, 6 and 10 need the MNIST IDX files: point ``MNIST_DIR`` at a
directory holding ``train-images-idx3-ubyte[.gz]`` and friends. Without them
those criteria fail and say why. Set ``ACCEPTANCE_DIR`` to keep run artifacts.
"""

from __future__ import annotations

import itertools
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from oracles import chi_square_pvalue, sgm_epsilon_oracle  # noqa: E402

from glister_dp.config import config_from_dict  # noqa: E402
from glister_dp.data import LabeledDataset  # noqa: E402
from glister_dp.experiment import emit_fig2_data, read_csv, run_allocation_sweep, run_experiment  # noqa: E402
from glister_dp.model import init_model, per_sample_gradients  # noqa: E402
from glister_dp.privacy import (  # noqa: E402
    calibrate_sigma,
    epsilon_for,
    exp_mechanism_sample,
    exp_mechanism_sample_direct,
    sampling_distribution,
)
from glister_dp.selection import CoverageFunction, greedy_maximize  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
CHECKER = ROOT / "tools" / "check_ledger.py"
ORACLE_ORDERS = (2, 3, 4, 5, 6, 8, 10, 12, 16, 20, 24, 32, 48, 64, 128, 256)
MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
LINES: list[str] = []  # echoed in the terminal summary by conftest.py


def report(n: int, ok: bool, detail: str, budget_s: float | None = None, elapsed: float | None = None) -> None:
    if budget_s is not None and elapsed is not None:
        detail += f" [{elapsed:.1f}s / limit {budget_s:.0f}s]"
        ok = ok and elapsed < budget_s
    LINES.append(f"ACCEPTANCE criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    print("\n" + LINES[-1], flush=True)
    assert ok, detail


def info(n: int, detail: str) -> None:
    LINES.append(f"ACCEPTANCE criterion {n:2d}: INFO  {detail}")
    print("\n" + LINES[-1], flush=True)


def mnist_dir() -> Path | None:
    for c in (os.environ.get("MNIST_DIR"), ROOT / "data" / "mnist", Path.home() / "data" / "mnist"):
        if c and all((Path(c) / f).exists() or (Path(c) / (f + ".gz")).exists() for f in MNIST_FILES):
            return Path(c)
    return None


MNIST_MISSING = ("MNIST IDX files not found (set MNIST_DIR); this criterion is defined on MNIST "
                 "and has no synthetic substitute")


@pytest.fixture(scope="module")
def outdir(tmp_path_factory):
    env = os.environ.get("ACCEPTANCE_DIR")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("acceptance")


def _stats(vals):
    v = np.asarray(vals, dtype=float)
    return v.mean(), v.std(ddof=1) / math.sqrt(v.size)


def _by(rows, **match):
    return [float(r["final_accuracy"]) for r in rows
            if all(float(r[k]) == v if k != "strategy" else r[k] == v for k, v in match.items())]


# ---------------------------------------------------------------------------
# 1. per-sample gradients vs central finite differences

def _example_loss(state, x, y):
    from glister_dp.model import logits

    z = logits(state, x[None, :])[0]
    z = z - z.max()
    return float(np.log(np.exp(z).sum()) - z[y])


def test_criterion_01_gradient_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    for arch in ("logistic", "mlp"):
        worst[arch] = 0.0
        for trial in range(50):
            m, c = int(rng.integers(2, 7)), int(rng.integers(2, 5))
            state = init_model(arch, m, c, seed=trial, hidden=5 if arch == "mlp" else 0)
            state = state.with_theta(rng.normal(scale=0.7, size=state.p))
            x, y = rng.normal(size=m), int(rng.integers(c))
            ds = LabeledDataset(x[None, :], [y], c)
            g = per_sample_gradients(state, ds, [0]).grads[0]
            h = 1e-5
            fd = np.empty(state.p)
            for j in range(state.p):
                tp, tm = state.theta.copy(), state.theta.copy()
                tp[j] += h
                tm[j] -= h
                fd[j] = (_example_loss(state.with_theta(tp), x, y) - _example_loss(state.with_theta(tm), x, y)) / (2 * h)
            rel = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)
            worst[arch] = max(worst[arch], rel)
    ok = max(worst.values()) < 1e-4
    report(1, ok, f"100 pairs, worst relative error logistic={worst['logistic']:.2e} mlp={worst['mlp']:.2e} (< 1e-4)",
           60, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# 2. exponential mechanism frequencies

def test_criterion_02_exponential_mechanism():
    from scipy.stats import chi2_contingency

    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    draws = 100_000
    p_fit, p_agree = [], []
    for v in range(5):
        n = int(rng.integers(3, 9))
        u = rng.uniform(0, 1, n)
        eps0 = float(rng.uniform(0.5, 4.0))
        probs = sampling_distribution(u, eps0, 1.0)
        g_rng, d_rng = np.random.default_rng(1000 + v), np.random.default_rng(2000 + v)
        gumbel = np.bincount(exp_mechanism_sample(u, eps0, 1.0, g_rng, size=draws), minlength=n)
        direct = np.bincount(exp_mechanism_sample_direct(u, eps0, 1.0, d_rng, size=draws), minlength=n)
        p_fit.append(chi_square_pvalue(gumbel, probs))
        p_agree.append(chi2_contingency(np.vstack([gumbel, direct]))[1])
    ok = min(p_fit) > 0.01 and min(p_agree) > 0.01
    report(2, ok, f"5 vectors x 1e5 draws, min p vs exact={min(p_fit):.3f}, min p Gumbel vs direct={min(p_agree):.3f} (> 0.01)",
           60, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# 3. accountant vs quadrature oracle; calibration round trip

TRIPLES = [(0.01, 1.0, 1000), (0.02, 1.1, 2500), (0.05, 0.8, 100), (0.1, 1.5, 300), (0.004, 2.0, 10_000),
           (0.25, 3.0, 50), (0.5, 4.0, 20), (1.0, 5.0, 1), (0.853, 12.0, 30), (0.03, 0.7, 500)]


def test_criterion_03_accountant_oracle():
    t0 = time.perf_counter()
    delta = 1e-5
    worst = 0.0
    for q, sigma, steps in TRIPLES:
        got = epsilon_for(sigma, q, steps, delta, orders=ORACLE_ORDERS)
        want = sgm_epsilon_oracle(q, sigma, steps, delta, ORACLE_ORDERS)
        worst = max(worst, abs(got - want) / want)
    cal_worst = 0.0
    for target, q, steps in ((3.0, 0.02, 2500), (1.0, 0.01, 1000), (8.0, 0.5, 60)):
        sigma = calibrate_sigma(target, delta, q, steps)
        cal_worst = max(cal_worst, abs(epsilon_for(sigma, q, steps, delta) - target) / target)
    ok = worst < 0.02 and cal_worst <= 1e-3
    report(3, ok, f"10 triples, worst oracle rel. error={worst:.2e} (< 2%); calibration worst={cal_worst:.2e} (<= 0.1%)",
           120, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# 4. greedy (1 - 1/e) guarantee on coverage instances

def test_criterion_04_greedy_guarantee():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    ratios = []
    for n, k in ((12, 4), (14, 5), (10, 3)):
        sets = [set(rng.choice(30, size=int(rng.integers(2, 12)), replace=False).tolist()) for _ in range(n)]
        f = CoverageFunction(sets)
        greedy = f.value(greedy_maximize(f, n, k, beta=0.0).indices)
        opt = max(len(set().union(*(sets[i] for i in s))) for s in itertools.combinations(range(n), k))
        ratios.append(greedy / opt)
    ok = min(ratios) >= 1 - 1 / math.e
    report(4, ok, f"3 instances, greedy/OPT = {', '.join(f'{r:.3f}' for r in ratios)} (>= {1 - 1 / math.e:.3f})",
           60, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# MNIST experiments (criteria 5, 6, 10)

def _mnist_dataset(path):
    return {"kind": "idx-digits", "path": str(path), "val_size": 5000, "seed": 0}


@pytest.fixture(scope="module")
def mnist_runs(outdir):
    path = mnist_dir()
    if path is None:
        return None
    cfg = config_from_dict({
        "dataset": _mnist_dataset(path),
        "train": {"arch": "mlp", "hidden": 64, "eta": 0.05, "epochs": 30, "selection_interval": 5},
        "strategies": ["full-dp", "random-dp", "glister-dp"],
        "k_grid": [0.1, 0.3, 0.5], "eps_grid": [3.0], "seeds": [0, 1, 2, 3, 4],
    })
    t0 = time.perf_counter()
    status = run_experiment(cfg, outdir / "mnist_runs")
    return outdir / "mnist_runs", status, time.perf_counter() - t0


def _surrogate_em_run(outdir):
    """Same pipeline on a synthetic set with MNIST's shape (55k/5k/10k, 784 features, 10 classes)."""
    cfg = config_from_dict({
        "dataset": {"kind": "synthetic", "n_total": 70_000, "n_features": 784,
                    "class_ratios": {r: [0.1] * 10 for r in ("train", "val", "test")},
                    "split_fractions": {"train": 55 / 70, "val": 5 / 70, "test": 10 / 70}},
        "train": {"arch": "mlp", "hidden": 64, "eta": 0.05, "retain_diagnostics": True},
        "strategies": ["glister-dp"], "k_grid": [0.1], "eps_grid": [3.0], "seeds": [0], "workers": 1,
    })
    run_experiment(cfg, outdir / "surrogate_em")
    return next((outdir / "surrogate_em" / "runs").iterdir())


def _em_verdict(run_dir):
    import json

    _, tv_path = emit_fig2_data(run_dir)
    tv = json.loads(tv_path.read_text())
    em = max(r["tv_to_uniform"] for r in tv)
    true = min(r["tv_true_to_uniform"] for r in tv)
    return em < 0.05 and true > 0.2, f"{len(tv)} rounds, max EM TV={em:.2e} (< 0.05), min true-gain TV={true:.3f} (> 0.2)"


def test_criterion_05_em_near_uniform(outdir):
    t0 = time.perf_counter()
    path = mnist_dir()
    if path is None:
        ok, detail = _em_verdict(_surrogate_em_run(outdir))
        info(5, f"MNIST-shaped synthetic surrogate ({'would pass' if ok else 'would fail'}): {detail}")
        report(5, False, MNIST_MISSING)
    cfg = config_from_dict({
        "dataset": _mnist_dataset(path),
        "train": {"arch": "mlp", "hidden": 64, "eta": 0.05, "retain_diagnostics": True},
        "strategies": ["glister-dp"], "k_grid": [0.1], "eps_grid": [3.0], "seeds": [0], "workers": 1,
    })
    run_experiment(cfg, outdir / "mnist_em")
    ok, detail = _em_verdict(next((outdir / "mnist_em" / "runs").iterdir()))
    report(5, ok, "MNIST " + detail, 900, time.perf_counter() - t0)


def test_criterion_06_mnist_ordering(mnist_runs):
    if mnist_runs is None:
        report(6, False, MNIST_MISSING)
    out, status, elapsed = mnist_runs
    rows = [r for r in read_csv(out / "summary.csv") if r["status"] == "ok"]
    ordered, gaps, anchor = True, 0, ""
    parts = []
    for k in (0.1, 0.3, 0.5):
        full, _ = _stats(_by(rows, strategy="full-dp", k=k))
        rnd, se_r = _stats(_by(rows, strategy="random-dp", k=k))
        gl, se_g = _stats(_by(rows, strategy="glister-dp", k=k))
        ordered &= full >= rnd >= gl
        gaps += (rnd - gl) > math.hypot(se_r, se_g)
        parts.append(f"k={k}: full={full:.4f} random={rnd:.4f} glister={gl:.4f}")
        if k == 0.1:
            anchor = f"; RANDOM-DP k=0.1 vs reference 0.6982: {'within' if abs(rnd - 0.6982) <= 0.10 else 'outside'} 0.10"
    ok = status == 0 and ordered and gaps >= 2
    report(6, ok, "; ".join(parts) + f"; gaps > 1 SE at {gaps}/3 k{anchor}", 3600, elapsed)


def _min_clock_gap(out, k_values):
    """Smallest GLISTER-DP minus RANDOM-DP cumulative wall clock over matched epochs and seeds."""
    worst = math.inf
    for k in k_values:
        for seed in range(5):
            g = read_csv(out / "runs" / f"glister-dp_eps3_k{k:g}_seed{seed}" / "metrics.csv")
            r = read_csv(out / "runs" / f"random-dp_eps3_k{k:g}_seed{seed}" / "metrics.csv")
            worst = min(worst, min(float(a["wall_clock_s"]) - float(b["wall_clock_s"]) for a, b in zip(g, r)))
    return worst


def test_criterion_10_timing(mnist_runs, imbalanced_runs):
    if mnist_runs is None:
        info(10, f"synthetic runs of criterion 7: min clock gap = {_min_clock_gap(imbalanced_runs[0], (0.1, 0.5)):.3f}s")
        report(10, False, MNIST_MISSING + " (reuses criterion 6 runs)")
    worst = _min_clock_gap(mnist_runs[0], (0.1, 0.3, 0.5))
    report(10, worst >= 0, f"min over epochs of GLISTER-DP minus RANDOM-DP cumulative wall clock = {worst:.3f}s (>= 0)")


# ---------------------------------------------------------------------------
# synthetic experiments (criteria 7, 8)

SYNTHETIC = {"kind": "synthetic", "n_total": 5000, "n_features": 10, "seed": 0}


@pytest.fixture(scope="module")
def imbalanced_runs(outdir):
    cfg = config_from_dict({
        "dataset": SYNTHETIC,
        "strategies": ["glister-dp", "random-dp", "full-dp"],
        "k_grid": [0.1, 0.5], "eps_grid": [3.0], "seeds": [0, 1, 2, 3, 4],
    })
    t0 = time.perf_counter()
    status = run_experiment(cfg, outdir / "synthetic_imbalanced")
    return outdir / "synthetic_imbalanced", status, time.perf_counter() - t0


@pytest.fixture(scope="module")
def alloc_runs(outdir):
    cfg = config_from_dict({
        "dataset": SYNTHETIC, "k_grid": [0.1], "eps_grid": [3.0], "seeds": [0, 1, 2, 3, 4],
        "r_grid": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
    })
    t0 = time.perf_counter()
    status = run_allocation_sweep(cfg, outdir / "synthetic_alloc")
    return outdir / "synthetic_alloc", status, time.perf_counter() - t0


def test_criterion_07_synthetic_reversal(imbalanced_runs):
    out, status, elapsed = imbalanced_runs
    rows = [r for r in read_csv(out / "summary.csv") if r["status"] == "ok"]
    g1, se_g1 = _stats(_by(rows, strategy="glister-dp", k=0.1))
    r1, se_r1 = _stats(_by(rows, strategy="random-dp", k=0.1))
    f1, _ = _stats(_by(rows, strategy="full-dp", k=0.1))
    g5, se_g5 = _stats(_by(rows, strategy="glister-dp", k=0.5))
    r5, se_r5 = _stats(_by(rows, strategy="random-dp", k=0.5))
    beats = g1 > r1 and g1 > f1
    converges = abs(g5 - r5) < math.hypot(se_g5, se_r5)
    report(7, status == 0 and beats and converges,
           f"k=0.1: glister={g1:.4f}±{se_g1:.4f} random={r1:.4f}±{se_r1:.4f} full={f1:.4f} "
           f"(glister > both: {beats}); k=0.5: |glister-random|={abs(g5 - r5):.4f} vs SE {math.hypot(se_g5, se_r5):.4f} "
           f"(below: {converges})", 600, elapsed)


def test_criterion_08_allocation_monotone(alloc_runs):
    out, status, elapsed = alloc_runs
    agg = sorted(read_csv(out / "alloc_aggregate.csv"), key=lambda r: float(r["r"]))
    means = [float(r["mean_accuracy"]) for r in agg]
    sems = [float(r["sem_accuracy"]) for r in agg]
    drops = [(i, means[i] - means[i + 1]) for i in range(len(means) - 1) if means[i + 1] < means[i]]
    small = all(d <= max(sems[i], sems[i + 1]) for i, d in drops)
    ok = status == 0 and len(drops) <= 1 and small
    curve = " ".join(f"{float(r['r']):.1f}:{m:.4f}" for r, m in zip(agg, means))
    report(8, ok, f"mean accuracy by r [{curve}]; inversions={len(drops)} (<= 1, each within 1 SE: {small})",
           1800, elapsed)


# ---------------------------------------------------------------------------
# 9. ledger conservation, checked from the JSON-lines sidecars

def test_criterion_09_ledger_conservation(outdir, imbalanced_runs, alloc_runs, mnist_runs):
    res = subprocess.run([sys.executable, str(CHECKER), str(outdir)], capture_output=True, text=True)
    last = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr.strip()
    report(9, res.returncode == 0, f"independent checker over every acceptance run: {last}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s", "-p", "no:cacheprovider"]))
