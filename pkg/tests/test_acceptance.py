"""End-to-end acceptance gate.

Each test covers one numbered criterion and prints a single PASS/FAIL
line (visible even under output capture) before asserting.  The two
Monte-Carlo studies are session-scoped fixtures so their cost is paid
once.
"""

import time

import numpy as np
import pytest

from lmmsel import (EcmConfig, SelectorConfig, adaptive_weights, fit, gls_lasso,
                    kkt_residual, lasso_cd, profiled_objective, w_identity_check)
from lmmsel.blup import henderson_solve, blup_marginal_oracle, track_factorizations
from lmmsel.blup import GammaMatrix
from lmmsel.simgen import run_study

from conftest import random_instance, rng_for


def _report(capsys, num, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {num}: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture(scope="session")
def m1_study():
    t0 = time.monotonic()
    study = run_study("M1", 100, "lasso+", 0)
    return study, time.monotonic() - t0


@pytest.fixture(scope="session")
def m4_study():
    # p = 600 shows a sharp jump in the selected-support size along the
    # penalty path; a 100-point grid is needed to resolve the narrow
    # stable window between the flat region and the explosion
    t0 = time.monotonic()
    study = run_study("M4", 100, "lasso+", 0, grid_size=100, with_refit=True)
    return study, time.monotonic() - t0


def test_criterion_01_known_variance_equivalence(capsys):
    t0 = time.monotonic()
    worst = 0.0
    for seed in range(20):
        data, truth = random_instance(seed, n=60, p=30, q=2, levels=(6, 5),
                                      sparsity=5)
        variances = (truth["sigma2"], truth["sigma2_e"])
        lam = 6.0
        # drive the fixed-point iteration to numerical convergence: the
        # claim is about the fixed point, not any truncated iterate
        res = fit(data, EcmConfig(lam=lam, fixed_variances=variances,
                                  tol_beta=1e-16, tol_u=1e-16,
                                  tol_loglik=1e-16, max_iter=5000))
        oracle = gls_lasso(data, variances, lam)
        worst = max(worst, float(np.abs(res.state.beta - oracle).max()))
    elapsed = time.monotonic() - t0
    ok = worst <= 1e-4 and elapsed < 10
    _report(capsys, 1, ok,
            f"max |beta_ecm - beta_gls| = {worst:.2e} (<= 1e-4), {elapsed:.1f}s (< 10s)")
    assert worst <= 1e-4
    assert elapsed < 10


def test_criterion_02_covariance_identities(capsys):
    worst_w = worst_p = 0.0
    for seed in range(20):
        data, truth = random_instance(seed, n=24 + (seed % 17), p=8, q=2,
                                      levels=(5, 4))
        variances = (truth["sigma2"], truth["sigma2_e"])
        worst_w = max(worst_w, w_identity_check(data, variances))
        beta = rng_for(seed + 500).standard_normal(data.p) * 0.3
        h, marginal = profiled_objective(data, variances, beta, lam=2.0)
        worst_p = max(worst_p, abs(h - marginal) / max(1.0, abs(marginal)))
    ok = worst_w <= 1e-8 and worst_p <= 1e-8
    _report(capsys, 2, ok,
            f"W-identity {worst_w:.2e}, profiled identity {worst_p:.2e} (both <= 1e-8)")
    assert worst_w <= 1e-8
    assert worst_p <= 1e-8


def test_criterion_03_ecm_monotonicity(capsys):
    worst = -np.inf
    for seed in range(20):
        data, _ = random_instance(seed, n=60, p=20, q=2, levels=(6, 5))
        lam = float(rng_for(seed + 900).uniform(2.0, 12.0))
        res = fit(data, EcmConfig(lam=lam))
        deleted_at = set(res.deleted.values())
        traj = res.trajectory
        for t in range(1, len(traj)):
            if (t + 1) in deleted_at:
                continue
            worst = max(worst, traj[t] - traj[t - 1])
    ok = worst <= 1e-8
    _report(capsys, 3, ok, f"max objective increase between iterations "
                           f"{worst:.2e} (<= 1e-8)")
    assert worst <= 1e-8


def test_criterion_04_blup_dual_route(capsys):
    worst_u = worst_tr = 0.0
    for seed in range(50):
        rel = seed == 49
        data, truth = random_instance(seed, n=30 + (seed % 20), p=10, q=2,
                                      levels=(5, 4), with_relationship=rel)
        variances = (truth["sigma2"], truth["sigma2_e"])
        beta = rng_for(seed + 300).standard_normal(data.p) * 0.3
        gamma = GammaMatrix.from_variances((0, 1), truth["sigma2"], truth["sigma2_e"])
        res = henderson_solve(data, gamma, beta)
        oracle = blup_marginal_oracle(data, variances, beta)
        worst_u = max(worst_u, float(np.abs(res.u - oracle).max()))
        if not rel:
            blocks = np.repeat(gamma.gammas, [e.n_levels for e in data.effects])
            C = data.Z.T @ data.Z + np.diag(blocks)
            dense = float(np.trace(data.Z @ np.linalg.inv(C) @ data.Z.T))
            worst_tr = max(worst_tr, abs(res.cond_trace - dense))
    ok = worst_u <= 1e-8 and worst_tr <= 1e-8
    _report(capsys, 4, ok, f"dual-route BLUP diff {worst_u:.2e}, "
                           f"trace identity diff {worst_tr:.2e} (both <= 1e-8)")
    assert worst_u <= 1e-8
    assert worst_tr <= 1e-8


def test_criterion_05_m1_study(capsys, m1_study):
    study, elapsed = m1_study
    reports = study.reports
    assert not study.failures, study.failures
    s3 = np.array([r.sigma2_k_hat[2] for r in reports])
    deletion_rate = float((s3 == 0).mean())
    s3_mean = float(s3.mean())
    tp_mean = float(np.mean([r.tp for r in reports]))
    false_del = int(sum(r.false_deletion for r in reports))
    ok = (s3_mean <= 0.10 and deletion_rate >= 0.80 and tp_mean >= 4.9
          and false_del == 0 and elapsed < 900)
    _report(capsys, 5, ok,
            f"mean sigma2_3 {s3_mean:.3f} (<= 0.10), spurious deletion rate "
            f"{deletion_rate:.2f} (>= 0.80), mean TP {tp_mean:.2f} (>= 4.9), "
            f"false deletions {false_del} (= 0), {elapsed:.0f}s (< 900s)")
    assert s3_mean <= 0.10
    assert tp_mean >= 4.9
    assert false_del == 0
    assert elapsed < 900
    assert deletion_rate >= 0.80


def test_criterion_06_m4_study(capsys, m4_study):
    study, elapsed = m4_study
    reports = study.reports
    assert not study.failures, study.failures
    tp = float(np.mean([r.tp for r in reports]))
    size = float(np.mean([r.support_size for r in reports]))
    s_e = float(np.mean([r.sigma2_e_hat for r in reports]))
    mse = float(np.mean([r.mse for r in reports]))
    mse_refit = float(np.mean([r.mse for r in study.refit_reports]))
    ok = (4.8 <= tp <= 5.0 and 5.5 <= size <= 9.5 and 0.95 <= s_e <= 1.5
          and mse <= 0.60 and mse_refit < mse)
    _report(capsys, 6, ok,
            f"mean TP {tp:.2f} (in [4.8, 5.0]), |support| {size:.2f} (in [5.5, 9.5]), "
            f"sigma2_e {s_e:.2f} (in [0.95, 1.5]), MSE {mse:.3f} (<= 0.60), "
            f"refit MSE {mse_refit:.3f} (< penalized), {elapsed:.0f}s")
    assert 4.8 <= tp <= 5.0
    assert 5.5 <= size <= 9.5
    assert 0.95 <= s_e <= 1.5
    assert mse <= 0.60
    assert mse_refit < mse


def test_criterion_07_snr_calibration(capsys):
    from lmmsel.simgen import SCENARIOS, generate
    means = {}
    for name in ("M1", "M4"):
        snrs = [generate(SCENARIOS[name], (0, rep))[1].snr for rep in range(100)]
        means[name] = float(np.mean(snrs))
    ok = 0.70 <= means["M1"] <= 0.86 and 0.56 <= means["M4"] <= 0.70
    _report(capsys, 7, ok,
            f"mean SNR: M1 {means['M1']:.3f} (in [0.70, 0.86]), "
            f"M4 {means['M4']:.3f} (in [0.56, 0.70])")
    assert 0.70 <= means["M1"] <= 0.86
    assert 0.56 <= means["M4"] <= 0.70


def test_criterion_08_performance(capsys):
    from lmmsel import GroupingFactor, MixedModelData, RandomEffectSpec
    rng = rng_for(7)
    n, p = 500, 375
    X = np.empty((n, p))
    X[:, 0] = 1.0
    X[:, 1:] = rng.standard_normal((n, p - 1))
    f1 = GroupingFactor(np.repeat(np.arange(1, 101), 5), 100)
    f2 = GroupingFactor(np.tile(np.arange(1, 66), 8)[:n], 65)
    effects = (RandomEffectSpec(factor=f1, name="u1"),
               RandomEffectSpec(factor=f2, covariate=X[:, 1], covariate_index=1,
                                name="u2"))
    beta = np.zeros(p)
    beta[:5] = 0.8
    y = (X @ beta + effects[0].incidence @ rng.standard_normal(100)
         + effects[1].incidence @ rng.standard_normal(65) + rng.standard_normal(n))
    data = MixedModelData(y=y, X=X, effects=effects, unpenalized=frozenset({0}))
    assert data.N == 165
    t0 = time.monotonic()
    with track_factorizations() as sizes:
        res = fit(data, EcmConfig(lam=80.0))
    elapsed = time.monotonic() - t0
    biggest = max(sizes)
    ok = elapsed < 5 and biggest == data.N
    _report(capsys, 8, ok, f"n=500/p=375 fit in {elapsed:.2f}s (< 5s), largest "
                           f"factorized dimension {biggest} (= N = {data.N})")
    assert elapsed < 5
    assert biggest == data.N
    assert res.converged


def test_criterion_09_lasso_kkt_suite(capsys):
    worst = 0.0
    for seed in range(100):
        rng = rng_for(seed + 7000)
        n, p = 30 + seed % 30, 8 + seed % 20
        X = rng.standard_normal((n, p))
        r = X[:, :3] @ rng.uniform(1, 2, 3) + 0.5 * rng.standard_normal(n)
        kwargs = {"lam": float(rng.uniform(0.5, 15.0))}
        if seed % 3 == 1:
            kwargs["unpenalized"] = frozenset({0, p - 1})
        if seed % 3 == 2:
            kwargs["weights"] = adaptive_weights(X, r)
        cfg = SelectorConfig(**kwargs)
        sigma_e2 = float(rng.uniform(0.5, 2.0))
        out = lasso_cd(X, r, sigma_e2, cfg)
        worst = max(worst, kkt_residual(X, r, out.beta, sigma_e2, cfg))
    tol = 10 * SelectorConfig().cd_tol
    ok = worst <= tol
    _report(capsys, 9, ok, f"max KKT residual {worst:.2e} over 100 problems "
                           f"(<= {tol:.0e})")
    assert worst <= tol


def test_criterion_10_simulate_determinism(capsys, tmp_path):
    from lmmsel.cli import main
    argv = ["simulate", "--model", "M1", "--reps", "2", "--seed", "11",
            "--grid-size", "8"]
    d1, d2 = str(tmp_path / "r1"), str(tmp_path / "r2")
    assert main(argv + ["--out-dir", d1]) == 0
    assert main(argv + ["--out-dir", d2]) == 0
    with open(d1 + "/aggregate.csv", "rb") as fh:
        a = fh.read()
    with open(d2 + "/aggregate.csv", "rb") as fh:
        b = fh.read()
    ok = a == b
    _report(capsys, 10, ok, f"aggregate CSV byte-identical across two runs "
                            f"({len(a)} bytes)")
    assert a == b
