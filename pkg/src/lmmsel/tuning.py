"""Penalty-path construction and BIC/EBIC selection of the penalty level.

The path is fitted from the largest penalty downward with warm-started
coefficients.  Entries are flagged degenerate (and the path truncated)
as soon as the support outgrows its cap or the residual variance
collapses, which is where the likelihood starts to explode; the argmin
is taken over the surviving entries only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .ecm import EcmConfig, FitResult, SupportCapExceeded, fit, neg2_penalized_marginal
from .model import MixedModelData
from .penalized_ls import NonConvergenceError


class TuningError(RuntimeError):
    """Every path entry came out degenerate; no penalty can be chosen."""


@dataclass
class BicValue:
    lam: float
    loglik_part: float   # log|V| + (y-Xb)' V^{-1} (y-Xb)
    df: int
    bic: float
    ebic: float
    support_size: int
    degenerate: bool
    sigma2_e: float = float("nan")


@dataclass
class TuningResult:
    entries: list
    fits: list
    best_index: int
    criterion: str

    @property
    def best_lambda(self) -> float:
        return self.entries[self.best_index].lam

    @property
    def best_fit(self) -> FitResult:
        return self.fits[self.best_index]


def lambda_grid(data: MixedModelData, count: int = 50, min_ratio: float = 0.01) -> np.ndarray:
    """Log-spaced descending penalties from lambda_max (smallest penalty
    with an all-zero penalized start) down to min_ratio * lambda_max."""
    if count < 2:
        raise ValueError("count must be >= 2")
    if not 0 < min_ratio < 1:
        raise ValueError("min_ratio must lie in (0, 1)")
    penalized = [j for j in range(data.p) if j not in data.unpenalized]
    if not penalized:
        raise ValueError("no penalized columns: nothing to tune")
    centered = data.y - data.y.mean()
    lam_max = 2.0 * float(np.abs(data.X[:, penalized].T @ centered).max())
    if lam_max <= 0:
        raise ValueError("response is orthogonal to every penalized column")
    return np.geomspace(lam_max, min_ratio * lam_max, count)


def _log_binom(p: int, k: int) -> float:
    return math.lgamma(p + 1) - math.lgamma(k + 1) - math.lgamma(p - k + 1)


def bic(data: MixedModelData, fit_result: FitResult) -> BicValue:
    """BIC of a converged (or flagged) fit: the marginal log-determinant
    and quadratic form via the N x N route, plus df * log(n); df counts
    the surviving variance parameters (sigma_e^2 included) and the
    selected fixed effects."""
    state = fit_result.state
    loglik_part = neg2_penalized_marginal(data, state, 0.0) - data.n * math.log(2.0 * math.pi)
    support_size = len(fit_result.support)
    df = 1 + len(state.active) + support_size
    value = loglik_part + df * math.log(data.n)
    ebic = value + 2.0 * _log_binom(data.p, support_size)
    return BicValue(lam=fit_result.lam, loglik_part=loglik_part, df=df, bic=value,
                    ebic=ebic, support_size=support_size, degenerate=False,
                    sigma2_e=state.sigma2_e)


def _degenerate_entry(lam: float) -> BicValue:
    return BicValue(lam=lam, loglik_part=float("nan"), df=0, bic=float("nan"),
                    ebic=float("nan"), support_size=-1, degenerate=True)


def tune(data: MixedModelData, grid, cfg: EcmConfig, criterion: str = "bic",
         warm_start: bool = True, threads: int = 1) -> TuningResult:
    """Fit the whole path and choose the penalty minimizing the criterion
    over non-degenerate entries."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty grid")
    if criterion not in ("bic", "ebic"):
        raise ValueError("criterion must be 'bic' or 'ebic'")
    cap = cfg.cap_for(data)
    var_floor = 1e-6 * float(np.var(data.y))

    entries: list[BicValue] = []
    fits: list[Optional[FitResult]] = []
    if warm_start or threads <= 1:
        results = _path_sequential(data, grid, cfg, warm_start)
    else:
        results = _path_parallel(data, grid, cfg, threads)
    truncated = False
    for lam, res in zip(grid, results):
        if truncated or res is None:
            entries.append(_degenerate_entry(lam))
            fits.append(None)
            truncated = True
            continue
        value = bic(data, res)
        if value.support_size > cap or res.state.sigma2_e < var_floor:
            value.degenerate = True
            truncated = True
        entries.append(value)
        fits.append(res)

    usable = [i for i, e in enumerate(entries) if not e.degenerate]
    if not usable:
        raise TuningError("all path entries degenerate; widen or raise the grid")
    key = (lambda i: entries[i].bic) if criterion == "bic" else (lambda i: entries[i].ebic)
    best = min(usable, key=key)
    return TuningResult(entries=entries, fits=fits, best_index=best, criterion=criterion)


def _path_sequential(data, grid, cfg, warm_start):
    results = []
    beta0 = None
    stop = False
    for lam in grid:
        if stop:
            results.append(None)
            continue
        try:
            res = fit(data, replace(cfg, lam=float(lam)), beta0=beta0)
        except (SupportCapExceeded, NonConvergenceError):
            results.append(None)
            stop = True
            continue
        results.append(res)
        if warm_start:
            beta0 = res.state.beta
    return results


def _fit_one(args):
    data, cfg, lam = args
    try:
        return fit(data, replace(cfg, lam=float(lam)))
    except (SupportCapExceeded, NonConvergenceError):
        return None


def _path_parallel(data, grid, cfg, threads):
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_fit_one, [(data, cfg, lam) for lam in grid]))
