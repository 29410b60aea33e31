"""Benchmark scenario generators (M1-M4) and the Monte-Carlo scorecard.

Each scenario draws a fresh design, random effects and noise per
replicate from a counter-based Philox stream keyed by (base_seed,
replicate), so studies are bit-reproducible across platforms.  M1 is
fitted with a third, spurious random effect; M2 uses AR(1)-correlated
covariates and a partly random true support.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ecm import EcmConfig, FitResult, fit, refit
from .model import GroupingFactor, MixedModelData, RandomEffectSpec, standardize
from .tuning import TuningError, lambda_grid, tune

PLAIN_METHODS = ("lasso", "adlasso")
MIXED_METHODS = ("lasso+", "adlasso+")
METHODS = PLAIN_METHODS + MIXED_METHODS


@dataclass(frozen=True)
class SimulationScenario:
    name: str
    n: int
    p: int
    beta_value: float
    fitted_q: int
    group_sizes: tuple   # per fitted effect: (levels, obs per level)
    rho: float = 0.0     # AR(1) correlation of the covariates (M2)
    random_support: bool = False  # part of J drawn per replicate (M2)
    true_q: int = 2


SCENARIOS = {
    "M1": SimulationScenario("M1", 120, 80, 2.0 / 3.0, 3, ((20, 6), (20, 6), (20, 6))),
    "M2": SimulationScenario("M2", 120, 300, 3.0 / 4.0, 2, ((20, 6), (20, 6)),
                             rho=0.5, random_support=True),
    "M3": SimulationScenario("M3", 120, 300, 2.0 / 3.0, 2, ((20, 6), (15, 8))),
    "M4": SimulationScenario("M4", 120, 600, 2.0 / 3.0, 2, ((20, 6), (20, 6))),
}


@dataclass
class GroundTruth:
    beta: np.ndarray
    support: tuple
    true_effects: tuple   # indices (into data.effects) of the real effects
    signal: np.ndarray    # X beta
    noise: np.ndarray     # sum_k Z_k u_k + eps
    snr: float
    scenario: str


@dataclass
class SimulationReport:
    truth: bool
    support_exact: bool
    support_size: int
    tp: int
    sigma2_e_hat: float
    sigma2_k_hat: np.ndarray
    beta_hat_on_support: np.ndarray
    mse: float
    snr: float
    false_deletion: bool


def _rng(base_seed: int, counter: int) -> np.random.Generator:
    key = np.array([np.uint64(base_seed), np.uint64(counter)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _ar1_chol(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    cov = rho ** np.abs(idx[:, None] - idx[None, :])
    return np.linalg.cholesky(cov)


_AR1_CACHE: dict = {}


def generate(scenario: SimulationScenario, seed, support_rng: Optional[np.random.Generator] = None):
    """One replicate: returns (MixedModelData, GroundTruth).

    ``seed`` is either an int or an (base_seed, replicate) pair; the draw
    order is fixed: design body, support indices (M2), random effects,
    residual noise.
    """
    if isinstance(seed, tuple):
        rng = _rng(*seed)
    else:
        rng = _rng(int(seed), 0)
    n, p = scenario.n, scenario.p

    X = np.empty((n, p))
    X[:, 0] = 1.0
    body = rng.standard_normal((n, p - 1))
    if scenario.rho:
        key = (p - 1, scenario.rho)
        if key not in _AR1_CACHE:
            _AR1_CACHE[key] = _ar1_chol(p - 1, scenario.rho)
        body = body @ _AR1_CACHE[key].T
    X[:, 1:] = body
    X, _, _ = standardize(X, skip={0})

    if scenario.random_support:
        src = support_rng if support_rng is not None else rng
        extra = src.choice(np.arange(2, p), size=3, replace=False)
        support = (0, 1) + tuple(sorted(int(j) for j in extra))
    else:
        support = tuple(range(5))
    beta = np.zeros(p)
    beta[list(support)] = scenario.beta_value

    factors = [GroupingFactor(np.repeat(np.arange(1, nk + 1), sz), nk)
               for nk, sz in scenario.group_sizes]
    effects = []
    for k, factor in enumerate(factors):
        cov = None if k == 0 else X[:, k]
        effects.append(RandomEffectSpec(factor=factor, covariate=cov,
                                        covariate_index=k, name=f"u{k + 1}"))

    signal = X @ beta
    noise = np.zeros(n)
    for k in range(scenario.true_q):
        u_k = rng.standard_normal(factors[k].level_count)
        noise += effects[k].incidence @ u_k
    noise += rng.standard_normal(n)
    y = signal + noise

    data = MixedModelData(y=y, X=X, effects=tuple(effects), unpenalized=frozenset({0}),
                          column_names=tuple(f"x{j + 1}" for j in range(p)))
    snr = float(signal @ signal) / float(noise @ noise)
    truth = GroundTruth(beta=beta, support=support,
                        true_effects=tuple(range(scenario.true_q)),
                        signal=signal, noise=noise, snr=snr, scenario=scenario.name)
    return data, truth


def evaluate(fit_result: FitResult, truth: GroundTruth, data: MixedModelData) -> SimulationReport:
    """Scorecard of one fit against the generating truth."""
    est = data.X @ fit_result.state.beta
    mse = float(np.sum((truth.signal - est) ** 2)) / data.n
    support = set(fit_result.support)
    surviving = set(fit_result.state.active)
    support_exact = support == set(truth.support)
    truth_flag = support_exact and surviving == set(truth.true_effects)
    tp = len(support & set(truth.support))
    q_fitted = max(data.q, (max(fit_result.state.active) + 1) if fit_result.state.active else 0)
    sigma2_k = fit_result.sigma2_full(q_fitted) if q_fitted else np.zeros(0)
    beta_on_j = fit_result.state.beta[list(truth.support)]
    false_del = any(k not in surviving for k in truth.true_effects) if data.q else False
    return SimulationReport(
        truth=truth_flag, support_exact=support_exact, support_size=len(support),
        tp=tp, sigma2_e_hat=float(fit_result.state.sigma2_e), sigma2_k_hat=sigma2_k,
        beta_hat_on_support=beta_on_j, mse=mse, snr=truth.snr,
        false_deletion=false_del)


@dataclass
class StudyResult:
    scenario: str
    method: str
    reps: int
    base_seed: int
    reports: list
    refit_reports: list
    failures: list   # (replicate, message)

    def aggregate(self, refit: bool = False) -> dict:
        reports = self.refit_reports if refit else self.reports
        return aggregate_reports(reports)


def _mean_sd(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return float("nan"), float("nan")
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def aggregate_reports(reports) -> dict:
    """Means and sds of every scorecard field across replicates."""
    out: dict[str, tuple[float, float]] = {}
    if not reports:
        return out
    out["truth"] = _mean_sd([r.truth for r in reports])
    out["support_exact"] = _mean_sd([r.support_exact for r in reports])
    out["support_size"] = _mean_sd([r.support_size for r in reports])
    out["tp"] = _mean_sd([r.tp for r in reports])
    out["sigma2_e"] = _mean_sd([r.sigma2_e_hat for r in reports])
    q = max(len(r.sigma2_k_hat) for r in reports)
    for k in range(q):
        out[f"sigma2_{k + 1}"] = _mean_sd(
            [r.sigma2_k_hat[k] if k < len(r.sigma2_k_hat) else 0.0 for r in reports])
    m = len(reports[0].beta_hat_on_support)
    for j in range(m):
        out[f"beta_{j + 1}"] = _mean_sd([r.beta_hat_on_support[j] for r in reports])
    out["mse"] = _mean_sd([r.mse for r in reports])
    out["snr"] = _mean_sd([r.snr for r in reports])
    out["false_deletion"] = _mean_sd([r.false_deletion for r in reports])
    return out


def _strip_effects(data: MixedModelData) -> MixedModelData:
    return MixedModelData(y=data.y, X=data.X, effects=(), unpenalized=data.unpenalized,
                          column_names=data.column_names)


def run_replicate(scenario: SimulationScenario, method: str, base_seed: int, rep: int,
                  grid_size: int = 50, min_ratio: float = 0.01, criterion: str = "bic",
                  with_refit: bool = False, cfg: Optional[EcmConfig] = None,
                  fixed_support: bool = False):
    """Generate, tune and score one replicate; returns
    (SimulationReport, refit SimulationReport or None)."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; known: {METHODS}")
    support_rng = _rng(base_seed, 0xFFFFFFFF) if fixed_support else None
    data, truth = generate(scenario, (base_seed, rep), support_rng=support_rng)
    work = _strip_effects(data) if method in PLAIN_METHODS else data
    selector = "adlasso" if method.startswith("ad") else "lasso"
    base_cfg = cfg or EcmConfig()
    from dataclasses import replace
    base_cfg = replace(base_cfg, selector=selector)
    grid = lambda_grid(work, grid_size, min_ratio)
    tres = tune(work, grid, base_cfg, criterion=criterion)
    best = tres.best_fit
    report = evaluate(best, truth, data)
    refit_report = None
    if with_refit:
        rf = refit(work, best.support, best.state.active, cfg=base_cfg)
        refit_report = evaluate(rf, truth, data)
    return report, refit_report


def run_study(scenario_name: str, reps: int, method: str, base_seed: int,
              grid_size: int = 50, min_ratio: float = 0.01, criterion: str = "bic",
              with_refit: bool = False, cfg: Optional[EcmConfig] = None,
              fixed_support: bool = False, threads: int = 1) -> StudyResult:
    """Monte-Carlo study: ``reps`` independent replicates of one scenario
    and method.  Per-replicate failures are recorded, not fatal."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    scenario = SCENARIOS[scenario_name]
    args = [(scenario, method, base_seed, rep, grid_size, min_ratio, criterion,
             with_refit, cfg, fixed_support) for rep in range(reps)]
    reports, refits, failures = [], [], []
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_replicate_wrapper, args))
    else:
        outcomes = [_replicate_wrapper(a) for a in args]
    for rep, outcome in enumerate(outcomes):
        if isinstance(outcome, str):
            failures.append((rep, outcome))
            continue
        report, refit_report = outcome
        reports.append(report)
        if refit_report is not None:
            refits.append(refit_report)
    return StudyResult(scenario=scenario_name, method=method, reps=reps,
                       base_seed=base_seed, reports=reports, refit_reports=refits,
                       failures=failures)


def _replicate_wrapper(args):
    try:
        return run_replicate(*args)
    except (TuningError, ValueError, RuntimeError) as exc:
        return f"{type(exc).__name__}: {exc}"
