"""Weighted l1-penalized least squares by coordinate descent.

This is the M-step-for-beta solver family: the objective is

    ||r - X b||^2 + lam * sigma_e2 * sum_j w_j |b_j|

so the per-coordinate soft threshold is lam * sigma_e2 * w_j / 2.
Unpenalized columns get effective weight 0.  Selectors are pluggable and
registered by name; bundled ones are the plain Lasso and the adaptive
Lasso whose weights come from univariate OLS fits.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .model import DegenerateColumnError

ADAPTIVE_WEIGHT_CAP = 1e12


class NonConvergenceError(RuntimeError):
    """Coordinate descent hit its pass cap before the KKT conditions held."""

    def __init__(self, message, beta=None):
        super().__init__(message)
        self.beta = beta


@dataclass(frozen=True)
class SelectorConfig:
    """Penalty level and solver controls for one selection call."""

    lam: float = 0.0
    weights: Optional[np.ndarray] = None
    unpenalized: frozenset = frozenset()
    cd_tol: float = 1e-7
    cd_max_pass: int = 100_000

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.cd_tol <= 0 or self.cd_max_pass <= 0:
            raise ValueError("cd_tol and cd_max_pass must be positive")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise ValueError("weights must be finite and nonnegative")
            object.__setattr__(self, "weights", w)
        object.__setattr__(self, "unpenalized", frozenset(self.unpenalized))


@dataclass(frozen=True)
class SelectorOutcome:
    beta: np.ndarray
    support: tuple
    objective: float


def soft_threshold(z: float, t: float) -> float:
    """sign(z) * max(|z| - t, 0)."""
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


def _thresholds(p: int, sigma_e2: float, cfg: SelectorConfig) -> np.ndarray:
    w = np.ones(p) if cfg.weights is None else cfg.weights.copy()
    if w.shape != (p,):
        raise ValueError("weights length != p")
    for j in cfg.unpenalized:
        w[j] = 0.0
    return 0.5 * cfg.lam * sigma_e2 * w


def _objective(resid: np.ndarray, beta: np.ndarray, thr: np.ndarray) -> float:
    return float(resid @ resid + 2.0 * (thr * np.abs(beta)).sum())


def kkt_residual(X: np.ndarray, r: np.ndarray, beta: np.ndarray,
                 sigma_e2: float, cfg: SelectorConfig) -> float:
    """Max normalized KKT violation of ``beta`` for the penalized objective.

    Stationarity reads X_j'(r - X beta) = t_j sign(b_j) on the support and
    |X_j'(r - X beta)| <= t_j off it; violations are scaled by
    max(1, ||X'r||_inf).
    """
    thr = _thresholds(X.shape[1], sigma_e2, cfg)
    g = X.T @ (r - X @ beta)
    scale = max(1.0, float(np.abs(X.T @ r).max(initial=0.0)))
    nz = beta != 0
    viol = np.where(nz, np.abs(g - thr * np.sign(beta)),
                    np.maximum(np.abs(g) - thr, 0.0))
    # columns that are identically zero carry no constraint
    viol[(X ** 2).sum(axis=0) == 0] = 0.0
    return float(viol.max(initial=0.0)) / scale


def _direct_solve(gram, c, thr, beta0, live, cd_tol, scale, solve_cache):
    """Closed-form shot at the minimizer on the warm start's sign orthant.

    Restricted to S = supp(beta0) + unpenalized columns, the penalized
    objective is smooth with solution gram_SS^{-1} (c_S - t_S sign(b_S));
    when the solved signs agree with the warm start and the off-support
    KKT conditions hold, that is the global minimizer.  Returns None when
    either check fails (the caller falls back to coordinate descent).
    The S-block Cholesky is cached across calls, keyed by S.
    """
    from scipy.linalg import cho_factor, cho_solve

    S = np.flatnonzero((beta0 != 0) | ((thr == 0) & live))
    if S.size == 0 or S.size >= gram.shape[0] * 2:
        return None
    signs = np.sign(beta0[S])
    key = tuple(S.tolist())
    cf = None if solve_cache is None else solve_cache.get(key)
    if cf is None:
        try:
            cf = cho_factor(gram[np.ix_(S, S)], lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            return None
        if solve_cache is not None:
            if len(solve_cache) > 64:
                solve_cache.clear()
            solve_cache[key] = cf
    t_S = thr[S]
    b_S = cho_solve(cf, c[S] - t_S * signs, check_finite=False)
    penalized = t_S > 0
    if np.any(np.sign(b_S[penalized]) != signs[penalized]):
        return None
    g = c - gram[:, S] @ b_S
    viol = np.maximum(np.abs(g) - thr, 0.0)
    viol[S] = np.abs(g[S] - t_S * signs)
    viol[~live] = 0.0
    if float(viol.max(initial=0.0)) / scale > cd_tol:
        return None
    beta = np.zeros(gram.shape[0])
    beta[S] = b_S
    return beta


def lasso_cd(X: np.ndarray, r: np.ndarray, sigma_e2: float, cfg: SelectorConfig,
             beta0: Optional[np.ndarray] = None,
             gram: Optional[np.ndarray] = None,
             solve_cache: Optional[dict] = None) -> SelectorOutcome:
    """Coordinate descent on the gram matrix with an active-set strategy.

    A warm start is first tried as a closed-form solve on its own sign
    orthant; failing that, the solver sweeps the working set (support +
    unpenalized columns) until the max coefficient change drops below
    ``cd_tol``, then rescans the full KKT system and pulls in violators;
    it terminates when the normalized KKT residual is below ``cd_tol``.
    """
    X = np.asarray(X, dtype=float)
    r = np.asarray(r, dtype=float).ravel()
    n, p = X.shape
    if r.size != n:
        raise ValueError("r length != n")
    thr = _thresholds(p, sigma_e2, cfg)

    if gram is None:
        gram = X.T @ X
    diag = np.diag(gram).copy()
    c = X.T @ r
    scale = max(1.0, float(np.abs(c).max(initial=0.0)))

    if not thr.any():
        # unpenalized limit: plain least squares
        beta, *_ = np.linalg.lstsq(X, r, rcond=None)
        resid = r - X @ beta
        return SelectorOutcome(beta, tuple(np.flatnonzero(beta)), _objective(resid, beta, thr))

    live = diag > 0
    beta = np.zeros(p) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    if beta0 is not None:
        direct = _direct_solve(gram, c, thr, beta, live, cfg.cd_tol, scale, solve_cache)
        if direct is not None:
            resid = r - X @ direct
            return SelectorOutcome(direct, tuple(np.flatnonzero(direct)),
                                   _objective(resid, direct, thr))

    q = gram @ beta if beta.any() else np.zeros(p)
    work = np.flatnonzero((beta != 0) | ((thr == 0) & live))
    passes = 0
    while True:
        # optimize over the current working set (bounded burst, then the
        # closed-form orthant solve gets another shot with settled signs)
        burst = 0
        while True:
            passes += 1
            burst += 1
            if passes > cfg.cd_max_pass:
                raise NonConvergenceError(
                    f"coordinate descent: no convergence in {cfg.cd_max_pass} passes",
                    beta=beta)
            max_delta = 0.0
            for j in work:
                bj = beta[j]
                rho = c[j] - q[j] + diag[j] * bj
                bn = soft_threshold(rho, thr[j]) / diag[j]
                if bn != bj:
                    q += gram[:, j] * (bn - bj)
                    beta[j] = bn
                    d = abs(bn - bj)
                    if d > max_delta:
                        max_delta = d
            if max_delta < cfg.cd_tol or burst >= 5:
                break
        direct = _direct_solve(gram, c, thr, beta, live, cfg.cd_tol, scale, solve_cache)
        if direct is not None:
            beta = direct
            break
        # full KKT scan; pull in violators
        g = c - q
        nz = beta != 0
        viol = np.where(nz, np.abs(g - thr * np.sign(beta)),
                        np.maximum(np.abs(g) - thr, 0.0))
        viol[~live] = 0.0
        if viol.max(initial=0.0) / scale <= cfg.cd_tol:
            break
        work = np.flatnonzero(nz | (viol > 0) | ((thr == 0) & live))

    resid = r - X @ beta
    return SelectorOutcome(beta, tuple(np.flatnonzero(beta)), _objective(resid, beta, thr))


def adaptive_weights(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-column weights 1 / |univariate OLS slope|, capped at 1e12."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    norms = (X ** 2).sum(axis=0)
    if np.any(norms == 0):
        raise DegenerateColumnError("adaptive weights: zero column in X")
    slopes = (X.T @ y) / norms
    with np.errstate(divide="ignore"):
        w = 1.0 / np.abs(slopes)
    return np.minimum(w, ADAPTIVE_WEIGHT_CAP)


# ---------------------------------------------------------------------------
# Selector plugins
# ---------------------------------------------------------------------------


class LassoSelector:
    """Plain Lasso: unit weights, gram matrix cached per design."""

    def __init__(self):
        self._gram_for = None
        self._gram = None
        self._solve_cache: dict = {}

    def _gram_of(self, X):
        if self._gram_for is not X:
            self._gram = X.T @ X
            self._gram_for = X
            self._solve_cache = {}
        return self._gram

    def select(self, X, r, sigma_e2, cfg, beta0=None) -> SelectorOutcome:
        return lasso_cd(X, r, sigma_e2, cfg, beta0=beta0, gram=self._gram_of(X),
                        solve_cache=self._solve_cache)


class AdaptiveLassoSelector(LassoSelector):
    """Lasso with weights 1/|univariate OLS estimate|, computed once from
    the original (X, y) at initialization."""

    def __init__(self, X, y):
        super().__init__()
        self.weights = adaptive_weights(X, y)

    def select(self, X, r, sigma_e2, cfg, beta0=None) -> SelectorOutcome:
        if cfg.weights is None:
            cfg = replace(cfg, weights=self.weights)
        return lasso_cd(X, r, sigma_e2, cfg, beta0=beta0, gram=self._gram_of(X),
                        solve_cache=self._solve_cache)


class ConstantSelector:
    """Returns a fixed beta; turns the ECM loop into pure variance EM."""

    def __init__(self, beta):
        self.beta = np.asarray(beta, dtype=float)

    def select(self, X, r, sigma_e2, cfg, beta0=None) -> SelectorOutcome:
        thr = _thresholds(X.shape[1], sigma_e2, cfg)
        resid = r - X @ self.beta
        return SelectorOutcome(self.beta.copy(), tuple(np.flatnonzero(self.beta)),
                               _objective(resid, self.beta, thr))


_REGISTRY: dict[str, Callable] = {
    "lasso": lambda data: LassoSelector(),
    "adlasso": lambda data: AdaptiveLassoSelector(data.X, data.y),
}


def register_selector(name: str, factory: Callable) -> None:
    """Register ``factory(data) -> selector`` under ``name``."""
    _REGISTRY[name] = factory


def make_selector(name: str, data):
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown selector {name!r}; known: {sorted(_REGISTRY)}") from None
    return factory(data)


def selector_names() -> tuple:
    return tuple(sorted(_REGISTRY))
