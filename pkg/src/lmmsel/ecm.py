"""Multicycle ECM driver: joint fixed-effect selection and variance
estimation, with random-effect deletion at the variance boundary.

One iteration runs four steps: BLUP at the current beta, penalized
selection of beta on the working response y - Z u, BLUP at the new beta,
then closed-form variance updates.  An effect whose predicted squared
norm per level drops below ``delete_ratio`` times the residual variance
is removed from the model; when none remain the loop degenerates to a
penalized linear model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .blup import BlupResult, GammaMatrix, HendersonFactor
from .model import MixedModelData
from .penalized_ls import SelectorConfig, SelectorOutcome, make_selector

_LOG_2PI = math.log(2.0 * math.pi)


class SupportCapExceeded(RuntimeError):
    """The selector returned more nonzero coefficients than the model can
    carry; the fit is aborted (too many fixed effects selected)."""

    def __init__(self, size, cap):
        super().__init__(f"too many fixed effects selected ({size} > cap {cap})")
        self.size = size
        self.cap = cap


class RankError(ValueError):
    pass


@dataclass(frozen=True)
class ParameterState:
    """Current parameters: beta, one variance per active effect (aligned
    with ``active``), and the residual variance."""

    beta: np.ndarray
    sigma2: np.ndarray
    sigma2_e: float
    active: tuple

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "sigma2", np.asarray(self.sigma2, dtype=float))
        object.__setattr__(self, "active", tuple(self.active))
        if self.sigma2.shape != (len(self.active),):
            raise ValueError("one sigma2 per active effect required")
        if self.sigma2_e <= 0 or np.any(self.sigma2 <= 0):
            raise ValueError("variances must be positive")

    def gamma(self) -> GammaMatrix:
        return GammaMatrix.from_variances(self.active, self.sigma2, self.sigma2_e)

    def sigma2_of(self, k: int) -> float:
        """Variance of effect k; 0 when the effect is not active."""
        try:
            return float(self.sigma2[self.active.index(k)])
        except ValueError:
            return 0.0


@dataclass(frozen=True)
class EcmConfig:
    lam: float = 0.0
    selector: str = "lasso"
    weights: Optional[np.ndarray] = None
    tol_beta: float = 1e-6
    tol_u: float = 1e-6
    tol_loglik: float = 1e-8
    max_iter: int = 300
    delete_ratio: float = 1e-4
    support_cap: Optional[int] = None
    cd_tol: float = 1e-7
    cd_max_pass: int = 100_000
    disable_deletion: bool = False
    # (sigma2 per effect, sigma2_e): freeze the variances at these values
    # and skip both the variance updates and the deletion test
    fixed_variances: Optional[tuple] = None

    def __post_init__(self):
        if min(self.tol_beta, self.tol_u, self.tol_loglik) <= 0:
            raise ValueError("tolerances must be positive")
        if self.delete_ratio <= 0:
            raise ValueError("delete_ratio must be positive")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")

    def cap_for(self, data: MixedModelData) -> int:
        return self.support_cap if self.support_cap is not None else min(data.n - 1, data.p)

    def selector_config(self, unpenalized) -> SelectorConfig:
        return SelectorConfig(lam=self.lam, weights=self.weights, unpenalized=unpenalized,
                              cd_tol=self.cd_tol, cd_max_pass=self.cd_max_pass)


@dataclass
class StepDiagnostics:
    deleted: tuple
    outcome: SelectorOutcome
    u_half: Optional[BlupResult]


@dataclass
class FitResult:
    state: ParameterState
    u: Optional[BlupResult]
    support: tuple
    deleted: dict             # effect index -> iteration of removal
    trajectory: list
    converged: bool
    reason: str
    iterations: int
    lam: float

    def sigma2_full(self, q: int) -> np.ndarray:
        """Per-effect variances with 0 for deleted/inactive effects."""
        out = np.zeros(q)
        for i, k in enumerate(self.state.active):
            out[k] = self.state.sigma2[i]
        return out


def effective_unpenalized(data: MixedModelData, active) -> frozenset:
    """Base exemptions plus the design columns generating active effects."""
    cols = set(data.unpenalized)
    for k in active:
        idx = data.effects[k].covariate_index
        if idx is not None:
            cols.add(idx)
    return frozenset(cols)


def _check_cap(outcome: SelectorOutcome, cap: int, n: int = 0, n_levels: int = 0) -> None:
    size = len(outcome.support)
    if size > cap:
        raise SupportCapExceeded(size, cap)
    # the model itself requires N + |J| < n; beyond it the likelihood
    # degenerates (residual variance can reach zero)
    if n_levels and n_levels + size >= n:
        raise SupportCapExceeded(size, n - n_levels - 1)


def initialize(data: MixedModelData, cfg: EcmConfig, selector=None,
               beta0: Optional[np.ndarray] = None) -> ParameterState:
    """Starting point: selector on the plain linear model (unit sigma_e^2
    slot), then the 0.4/q vs 0.6 split of the residual variance."""
    if selector is None:
        selector = make_selector(cfg.selector, data)
    active = tuple(range(data.q))
    if beta0 is None:
        scfg = cfg.selector_config(effective_unpenalized(data, active))
        out = selector.select(data.X, data.y, 1.0, scfg)
        _check_cap(out, cfg.cap_for(data), data.n, data.N)
        beta0 = out.beta
    else:
        beta0 = np.asarray(beta0, dtype=float)
    if cfg.fixed_variances is not None:
        sigma2, sigma2_e = cfg.fixed_variances
        return ParameterState(beta0, np.asarray(sigma2, dtype=float), float(sigma2_e), active)
    resid = data.y - data.X @ beta0
    floor = 1e-8 * float(np.var(data.y)) + 1e-300
    s_init = max(float(resid @ resid) / data.n, floor)
    if data.q == 0:
        return ParameterState(beta0, np.zeros(0), s_init, ())
    sigma2 = np.full(data.q, 0.4 / data.q * s_init)
    return ParameterState(beta0, sigma2, 0.6 * s_init, active)


def ecm_step(data: MixedModelData, state: ParameterState, cfg: EcmConfig,
             selector=None, fac: Optional[HendersonFactor] = None
             ) -> tuple[ParameterState, Optional[BlupResult], StepDiagnostics]:
    """One four-step iteration; returns the new state, the second-E-step
    BLUP (None once no effect is active) and per-step diagnostics.
    ``fac`` may carry a Henderson factorization already built at the
    current state."""
    if selector is None:
        selector = make_selector(cfg.selector, data)
    cap = cfg.cap_for(data)
    scfg = cfg.selector_config(effective_unpenalized(data, state.active))

    if not state.active:
        out = selector.select(data.X, data.y, state.sigma2_e, scfg, beta0=state.beta)
        _check_cap(out, cap)
        resid = data.y - data.X @ out.beta
        s_e = max(float(resid @ resid) / data.n, 1e-300)
        new = ParameterState(out.beta, np.zeros(0), s_e, ())
        return new, None, StepDiagnostics((), out, None)

    if fac is None:
        fac = HendersonFactor(data, state.gamma())
    u_half = fac.blup(state.beta)
    working = data.y - fac.Z @ u_half.u
    out = selector.select(data.X, working, state.sigma2_e, scfg, beta0=state.beta)
    _check_cap(out, cap, data.n, sum(data.effects[k].n_levels for k in state.active))
    u_new = fac.blup(out.beta)

    if cfg.fixed_variances is not None:
        new = ParameterState(out.beta, state.sigma2, state.sigma2_e, state.active)
        return new, u_new, StepDiagnostics((), out, u_half)

    s_e_old = state.sigma2_e
    sizes = {k: data.effects[k].n_levels for k in state.active}
    sigma2_new = {k: (u_new.unorm2[k] + u_new.traces[k] * s_e_old) / sizes[k]
                  for k in state.active}
    resid = data.y - data.X @ out.beta - fac.Z @ u_new.u
    carry = sum(sizes[k] - g * u_new.traces[k]
                for k, g in zip(state.active, state.gamma().gammas))
    s_e_new = (float(resid @ resid) + carry * s_e_old) / data.n
    s_e_new = max(s_e_new, 1e-300)

    deleted = ()
    if not cfg.disable_deletion:
        deleted = tuple(k for k in state.active
                        if u_new.unorm2[k] / sizes[k] < cfg.delete_ratio * s_e_old)
    keep = tuple(k for k in state.active if k not in deleted)
    new = ParameterState(out.beta, np.array([sigma2_new[k] for k in keep]), s_e_new, keep)
    return new, u_new, StepDiagnostics(deleted, out, u_half)


def complete_data_loglik(data: MixedModelData, state: ParameterState,
                         u: Optional[BlupResult]) -> float:
    """Log-likelihood of (y, u) at the given parameters; the quantity whose
    change feeds the third stopping criterion."""
    n = data.n
    if state.active and u is not None:
        fitted = data.X @ state.beta + u.factor.Z @ u.u
    else:
        fitted = data.X @ state.beta
    rss = float(np.sum((data.y - fitted) ** 2))
    neg2 = n * _LOG_2PI + n * math.log(state.sigma2_e) + rss / state.sigma2_e
    for i, k in enumerate(state.active):
        eff = data.effects[k]
        nk = eff.n_levels
        neg2 += nk * _LOG_2PI + nk * math.log(state.sigma2[i]) + eff.logdet_a \
            + u.unorm2[k] / state.sigma2[i]
    return -0.5 * neg2


def _penalty_value(beta: np.ndarray, lam: float, weights=None, exempt=None) -> float:
    w = np.ones(beta.size) if weights is None else np.asarray(weights, dtype=float).copy()
    if exempt:
        w[list(exempt)] = 0.0
    return lam * float(w @ np.abs(beta))


def neg2_penalized_marginal(data: MixedModelData, state: ParameterState, lam: float,
                            fac: Optional[HendersonFactor] = None,
                            weights=None, exempt=None) -> float:
    """log|V| + (y-Xb)' V^{-1} (y-Xb) + lam |b|_1 + n log 2pi, evaluated
    through the N x N system: the determinant lemma gives log|V| from
    log|Z'Z + Gamma| and the quadratic form comes from the matching
    inverse identity.  No n x n factorization.

    ``weights``/``exempt`` switch the penalty term to the selector's
    weighted form lam * sum w_j |b_j| (exempt columns weigh 0); this is
    the quantity the ECM iterations actually drive downhill when some
    columns are excluded from the penalty.
    """
    n = data.n
    r = data.y - data.X @ state.beta
    rss = float(r @ r)
    pen = _penalty_value(state.beta, lam, weights, exempt)
    if not state.active:
        return n * math.log(state.sigma2_e) + rss / state.sigma2_e + pen + n * _LOG_2PI
    if fac is None:
        fac = HendersonFactor(data, state.gamma())
    rhs = fac.Z.T @ r
    quad = (rss - fac.quad_form(rhs)) / state.sigma2_e
    logdet_v = (n - fac.N) * math.log(state.sigma2_e) + fac.logdet
    for i, k in enumerate(state.active):
        eff = data.effects[k]
        logdet_v += eff.n_levels * math.log(state.sigma2[i]) + eff.logdet_a
    return logdet_v + quad + pen + n * _LOG_2PI


def fit(data: MixedModelData, cfg: EcmConfig,
        beta0: Optional[np.ndarray] = None) -> FitResult:
    """Iterate ecm_step until the three stopping criteria hold (squared
    changes in beta, in each u_k, and in the complete-data log-likelihood)
    or the iteration cap is reached."""
    selector = make_selector(cfg.selector, data)
    state = initialize(data, cfg, selector=selector, beta0=beta0)
    pen_weights = cfg.weights if cfg.weights is not None \
        else getattr(selector, "weights", None)
    deleted: dict[int, int] = {}
    trajectory: list[float] = []
    prev_beta = state.beta
    prev_u: Optional[dict] = None
    prev_L: Optional[float] = None
    u_res: Optional[BlupResult] = None
    converged = False
    reason = "max_iter"
    t = 0
    fac: Optional[HendersonFactor] = None
    for t in range(1, cfg.max_iter + 1):
        state, u_res, diag = ecm_step(data, state, cfg, selector=selector, fac=fac)
        for k in diag.deleted:
            deleted[k] = t
        # the factorization at the post-step state doubles as next step's
        fac = HendersonFactor(data, state.gamma()) if state.active else None
        trajectory.append(neg2_penalized_marginal(
            data, state, cfg.lam, fac=fac, weights=pen_weights,
            exempt=effective_unpenalized(data, state.active)))

        beta_ok = float(np.sum((state.beta - prev_beta) ** 2)) < cfg.tol_beta
        if prev_u is not None and u_res is not None:
            u_ok = all(float(np.sum((u_res.u_by_effect[k] - prev_u[k]) ** 2)) < cfg.tol_u
                       for k in state.active if k in prev_u)
        else:
            u_ok = u_res is None and prev_u is None and prev_L is not None
        L = complete_data_loglik(data, state, u_res)
        loglik_ok = prev_L is not None and (L - prev_L) ** 2 < cfg.tol_loglik

        prev_beta = state.beta
        prev_u = dict(u_res.u_by_effect) if u_res is not None else None
        prev_L = L
        if beta_ok and u_ok and loglik_ok:
            converged = True
            reason = "tolerances met"
            break
    support = tuple(np.flatnonzero(state.beta))
    return FitResult(state=state, u=u_res, support=support, deleted=deleted,
                     trajectory=trajectory, converged=converged, reason=reason,
                     iterations=t, lam=cfg.lam)


def refit(data: MixedModelData, support, active, cfg: Optional[EcmConfig] = None) -> FitResult:
    """Unpenalized ML re-estimation on the selected model: lam = 0, design
    restricted to ``support``, effects restricted to ``active``, deletion
    off.  Removes the selection bias of the penalized estimates."""
    support = tuple(sorted(support))
    active = tuple(sorted(active))
    n_levels = sum(data.effects[k].n_levels for k in active)
    if len(support) + n_levels >= data.n:
        raise ValueError("selected model too large for unpenalized refit")
    X_sub = data.X[:, list(support)] if support else np.zeros((data.n, 0))
    if support and np.linalg.matrix_rank(X_sub) < len(support):
        raise RankError("restricted design is rank deficient")
    names = data.names()
    sub = MixedModelData(
        y=data.y, X=X_sub, effects=tuple(data.effects[k] for k in active),
        unpenalized=frozenset(), column_names=tuple(names[j] for j in support))
    base = cfg or EcmConfig()
    sub_cfg = replace(base, lam=0.0, selector="lasso", weights=None, disable_deletion=True,
                      support_cap=None, fixed_variances=None)
    res = fit(sub, sub_cfg)
    beta_full = np.zeros(data.p)
    beta_full[list(support)] = res.state.beta
    state = ParameterState(beta_full, res.state.sigma2, res.state.sigma2_e,
                           tuple(active[i] for i in res.state.active))
    return FitResult(state=state, u=res.u, support=tuple(np.flatnonzero(beta_full)),
                     deleted={}, trajectory=res.trajectory, converged=res.converged,
                     reason=res.reason, iterations=res.iterations, lam=0.0)
