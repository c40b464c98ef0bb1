"""Headline acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL summary through ``acceptance_log``
before asserting, so the end-of-run report lists every criterion.
"""

import math
import time

import numpy as np
import pytest
from scipy.integrate import trapezoid
from sklearn.metrics import adjusted_rand_score

from oracles import exhaustive_min_cost, least_squares_line, potts_marginals
from peatcluster.cli import main
from peatcluster.cluster import (
    ModelConfig,
    ModelState,
    gibbs_mean_step,
    gibbs_variance_step,
    log_likelihood_matrix,
    run_sampler,
    summarize,
    variance_posterior,
)
from peatcluster.features import dataset_features, warp_distance, warp_indicator
from peatcluster.ingest import SynthConfig, acquisition_offsets, build_neighborhoods, grid_graph, synthesize_dataset
from peatcluster.spline import DailyCurve, decompose, fit_smoothing_spline
from peatcluster.srvf import SRVF, WarpingFunction, align, apply_warp, dp_steps, to_srvf, unit_grid

pytestmark = pytest.mark.slow


def test_criterion_01_spline_limits(acceptance_log):
    start = time.perf_counter()
    t = np.array([0, 6, 12, 24, 30, 36, 48, 60, 66, 72], dtype=float)
    y = 3 * np.sin(t / 11) + 0.02 * t
    interp_err = float(np.max(np.abs(fit_smoothing_spline(t, y, omega=0.0)(t) - y)))

    rng = np.random.default_rng(21)
    tt = np.sort(rng.choice(1573, 120, replace=False)).astype(float)
    yy = rng.normal(0, 2, 120) - 0.04 * tt
    line_err = float(np.max(np.abs(fit_smoothing_spline(tt, yy, omega=1e16)(tt) - least_squares_line(tt, yy))))

    from peatcluster.ingest import Series

    sched = acquisition_offsets(SynthConfig()).astype(float)
    ys = 8 * np.cos(2 * np.pi * (sched - 300) / 365.25) - 0.04 * sched + rng.normal(0, 2, len(sched))
    d = decompose(Series("x", sched.astype(int), ys))
    trend = fit_smoothing_spline(sched, ys, spar=1.0)
    days = d.trend.grid[1:-1].astype(float) - 1
    h = 1e-3
    fd = (trend(days + h) - trend(days - h)) / (2 * h)
    grad_err = float(np.max(np.abs(fd - d.trend_gradient.values[1:-1])))
    elapsed = time.perf_counter() - start

    ok = interp_err <= 1e-10 and line_err <= 1e-6 and grad_err <= 1e-6 and elapsed < 5
    acceptance_log(1, "spline limits", ok,
                   f"interp {interp_err:.1e}, LS line {line_err:.1e}, gradient {grad_err:.1e} mm/day, {elapsed:.2f}s")
    assert ok


def test_criterion_02_srvf_analytics(acceptance_log):
    start = time.perf_counter()
    grid = np.arange(1, 1574)
    u = (grid - 1) / 1572
    q = to_srvf(DailyCurve(grid, u**2), M=81)
    err = float(np.max(np.abs(q.values - np.sqrt(2 * q.grid))))
    checked = {p: abs(q.values[int(round(p * 80))] - math.sqrt(2 * p)) for p in (0.0, 0.25, 0.5, 1.0)}
    zero = to_srvf(DailyCurve(grid, np.full(len(grid), 7.5)))
    elapsed = time.perf_counter() - start
    ok = err <= 1e-9 and max(checked.values()) <= 1e-9 and np.all(zero.values == 0.0) and elapsed < 1
    acceptance_log(2, "SRVF analytics", ok, f"max |q - sqrt(2t)| {err:.1e}, constant -> 0, {elapsed:.2f}s")
    assert ok


def test_criterion_03_dp_optimality(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(33)
    steps = dp_steps()
    worst, n_pairs = 0.0, 0
    for i in range(60):
        M = int(rng.integers(6, 13))
        lam = float(rng.choice([0.0, 0.1, 1.0]))
        q, qs = SRVF(rng.normal(size=M)), SRVF(rng.normal(size=M))
        best, _ = exhaustive_min_cost(q.values, qs.values, lam, steps)
        worst = max(worst, abs(align(q, qs, lam).cost - best) / max(1.0, abs(best)))
        n_pairs += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and n_pairs >= 50 and elapsed < 120
    acceptance_log(3, "DP optimality", ok, f"{n_pairs} pairs, max relative gap {worst:.1e}, {elapsed:.1f}s")
    assert ok


def _smooth(coefs, t):
    return sum(c * np.cos((k + 1) * np.pi * t + 0.7 * k) for k, c in enumerate(coefs))


def test_criterion_04_elastic_invariance(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(44)
    wins = 0
    gaps = []
    for _ in range(25):
        c1, c2 = rng.normal(size=5), rng.normal(size=5)
        a = rng.uniform(-0.3, 0.3)
        p = rng.uniform(0.5, 2.0)
        disc = {}
        for M in (100, 400):
            t = unit_grid(M)
            g = WarpingFunction(t**p + a * np.sin(np.pi * t) * t**p * (1 - t**p) / 2)
            q1, q2 = SRVF(_smooth(c1, t)), SRVF(_smooth(c2, t))
            before = math.sqrt(trapezoid((q1.values - q2.values) ** 2, t))
            after = math.sqrt(trapezoid((apply_warp(q1, g).values - apply_warp(q2, g).values) ** 2, t))
            disc[M] = abs(after - before)
        gaps.append((disc[100], disc[400]))
        wins += disc[400] < disc[100]
    elapsed = time.perf_counter() - start
    ok = wins == len(gaps) and len(gaps) >= 20 and elapsed < 60
    ratio = np.median([b / a for a, b in gaps])
    acceptance_log(4, "elastic invariance", ok,
                   f"{wins}/{len(gaps)} pairs shrink from M=100 to M=400, median ratio {ratio:.3f}, {elapsed:.1f}s")
    assert ok


def test_criterion_05_warp_measures(acceptance_log):
    start = time.perf_counter()
    t = unit_grid(400)
    sq, rt = WarpingFunction(t**2), WarpingFunction(np.sqrt(t))
    vals = (warp_distance(sq), warp_indicator(sq), warp_distance(rt), warp_indicator(rt))
    elapsed = time.perf_counter() - start
    ok = (abs(vals[0] - 1 / 6) <= 1e-4 and vals[1] == 0.0 and abs(vals[2] - 1 / 6) <= 1e-4
          and vals[3] == 1.0 and elapsed < 1)
    acceptance_log(5, "warp measures", ok,
                   f"t^2: {vals[0]:.6f}/{vals[1]:g}, sqrt t: {vals[2]:.6f}/{vals[3]:g}, {elapsed:.3f}s")
    assert ok


def test_criterion_06_gibbs_exactness(acceptance_log):
    start = time.perf_counter()
    _, graph = grid_graph(2, 2)
    X = np.array([[0.4, 0.1], [-0.2, 0.3], [0.1, -0.5], [-0.6, -0.2]])
    means = np.array([[0.5, 0.0], [-0.5, 0.0]])
    sigma2 = 0.6
    marg, joint = potts_marginals(log_likelihood_matrix(X, means, sigma2),
                                  [set(a) for a in graph.adjacency()], 0.9)
    cfg = ModelConfig(K=2, eta=0.9, iterations=200_001, burn_in=1, thin=1, seed=6)
    chain = run_sampler(X, graph, cfg, init=ModelState(np.zeros(4, int), means, sigma2),
                        fix_means=True, fix_variance=True, store_labels=True)
    S = chain.n_samples
    codes = chain.labels @ (2 ** np.arange(3, -1, -1))
    freq = np.bincount(codes, minlength=16) / S
    exact = np.array([joint[tuple(int(b) for b in np.binary_repr(c, 4))] for c in range(16)])
    tv_joint = 0.5 * float(np.abs(freq - exact).sum())
    tv_marg = float(np.max(0.5 * np.abs(chain.label_counts / S - marg).sum(axis=1)))
    elapsed = time.perf_counter() - start
    ok = S >= 200_000 and tv_joint <= 0.02 and tv_marg <= 0.02 and elapsed < 120
    acceptance_log(6, "Gibbs exactness", ok,
                   f"{S} samples, TV joint {tv_joint:.4f}, max marginal TV {tv_marg:.4f}, {elapsed:.1f}s")
    assert ok


def test_criterion_07_conditional_moments(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(77)
    n_draws = 100_000
    X = rng.normal(size=(12, 4))
    labels = np.r_[np.zeros(5, int), np.ones(7, int)]
    state = ModelState(labels, np.zeros((2, 4)), 0.9)
    draws = np.array([gibbs_mean_step(state, X, rng).means for _ in range(n_draws)])
    z_mean = []
    for i, n_i in ((0, 5), (1, 7)):
        var = 0.9 / n_i
        target = X[labels == i].mean(axis=0)
        z_mean.extend(np.abs(draws[:, i].mean(axis=0) - target) / math.sqrt(var / n_draws))
        z_mean.extend(np.abs(draws[:, i].var(axis=0, ddof=1) - var) / (var * math.sqrt(2 / (n_draws - 1))))

    cfg = ModelConfig(K=2)
    vstate = ModelState(labels, np.array([X[:5].mean(0), X[5:].mean(0)]), 1.0)
    shape, rate = variance_posterior(vstate, X, cfg)
    s2 = np.array([gibbs_variance_step(vstate, X, cfg, rng).sigma2 for _ in range(n_draws)])
    mean = rate / (shape - 1)
    sd = mean / math.sqrt(shape - 2)
    z_var = abs(s2.mean() - mean) / (sd / math.sqrt(n_draws))

    big = ModelState(np.zeros(9662, int), np.zeros((1, 4)), 1.0)
    big_shape, _ = variance_posterior(big, np.zeros((9662, 4)), ModelConfig(K=1))
    elapsed = time.perf_counter() - start
    ok = max(z_mean) <= 3 and z_var <= 3 and big_shape == 19324.001 and elapsed < 60
    acceptance_log(7, "conditional moments", ok,
                   f"max mean-step z {max(z_mean):.2f}, variance-step z {z_var:.2f}, "
                   f"shape {big_shape!r}, {elapsed:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def recovery_run():
    start = time.perf_counter()
    ds, truth = synthesize_dataset(SynthConfig(n_per_cluster=(100, 100, 100), noise_sd=2.0, seed=8))
    fm, _, _ = dataset_features(ds)
    graph = build_neighborhoods(ds.locations)
    chain = run_sampler(fm, graph, ModelConfig(iterations=20_000, burn_in=2_000, thin=5, seed=8))
    report = summarize(chain)
    return truth, report, time.perf_counter() - start


def test_criterion_08_end_to_end_recovery(acceptance_log, recovery_run):
    truth, report, elapsed = recovery_run
    ari = adjusted_rand_score(truth, report.map_labels)
    confident = float(np.mean(report.probabilities.max(axis=1) >= 0.9))
    ok = ari >= 0.95 and confident >= 0.8 and elapsed < 600
    acceptance_log(8, "end-to-end recovery", ok,
                   f"ARI {ari:.4f}, {confident:.1%} of locations with max p >= 0.9, {elapsed:.1f}s")
    assert ok


def test_criterion_09_posterior_mean_pattern(acceptance_log, recovery_run):
    _, report, _ = recovery_run
    mu = report.mean_mu
    ind, trend = mu[:, 2], mu[:, 3]
    top = int(np.argmax(trend))
    others = [k for k in range(3) if k != top]
    gap = float(trend[top] - max(trend[others]))
    opposite = bool(ind[others].min() < 0 < ind[others].max())
    ok = opposite and gap >= 1.0
    acceptance_log(9, "posterior mean pattern", ok,
                   f"warp indicator means {np.round(ind, 3).tolist()}, "
                   f"trend means {np.round(trend, 3).tolist()}, gap {gap:.2f}")
    assert ok


def test_criterion_10_determinism(acceptance_log, tmp_path):
    start = time.perf_counter()
    assert main(["synth", "--out", str(tmp_path / "data"), "--seed", "10"]) == 0
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", "--input", str(tmp_path / "data" / "dataset.csv"), "--out", str(out)]) == 0
        outs.append((out / "condition_map.csv").read_bytes())
    elapsed = time.perf_counter() - start
    ok = outs[0] == outs[1] and elapsed < 600
    acceptance_log(10, "determinism", ok,
                   f"two default runs, condition_map.csv identical: {outs[0] == outs[1]}, {elapsed:.1f}s")
    assert ok


def test_criterion_11_scale(acceptance_log):
    start = time.perf_counter()
    ds, _ = synthesize_dataset(SynthConfig(n_per_cluster=(3221, 3221, 3220), seed=11))
    fm, _, _ = dataset_features(ds)
    graph = build_neighborhoods(ds.locations)
    chain = run_sampler(fm, graph, ModelConfig(iterations=1000, burn_in=100, thin=5, seed=11))
    lp = chain.log_posterior
    elapsed = time.perf_counter() - start
    ok = ds.N == 9662 and bool(np.all(np.isfinite(lp))) and float(np.ptp(lp)) > 0 and elapsed < 900
    acceptance_log(11, "scale smoke test", ok,
                   f"N={ds.N}, {chain.n_samples} kept, log posterior finite, range {np.ptp(lp):.1f}, "
                   f"{elapsed:.1f}s")
    assert ok
