"""Known-variance reference implementations on the dense n x n marginal
covariance V = sum_k sigma_k^2 Z_k A_k Z_k' + sigma_e^2 I.

These deliberately take the expensive route the ECM loop avoids; they
serve as independent test oracles (penalized GLS fixed point, inverse
identities) and for small-n validation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .blup import NumericError
from .model import MixedModelData
from .penalized_ls import SelectorConfig, SelectorOutcome, lasso_cd


@dataclass
class MarginalCovariance:
    V: np.ndarray
    chol: np.ndarray  # lower triangular, V = L L'

    @property
    def logdet(self) -> float:
        return 2.0 * float(np.log(np.diag(self.chol)).sum())

    def solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve((self.chol, True), b)

    def whiten(self, M: np.ndarray) -> np.ndarray:
        """L^{-1} M, so that whitened inner products realize V^{-1}."""
        return solve_triangular(self.chol, M, lower=True)


def _effect_cov(eff, s2: float) -> np.ndarray:
    A = eff.relationship if eff.relationship is not None else np.eye(eff.n_levels)
    return s2 * A


def marginal_covariance(data: MixedModelData, variances,
                        active: Optional[tuple] = None) -> MarginalCovariance:
    sigma2, sigma2_e = variances
    sigma2 = np.asarray(sigma2, dtype=float)
    active = tuple(range(data.q)) if active is None else tuple(active)
    if sigma2.shape != (len(active),):
        raise ValueError("one variance per active effect required")
    if sigma2_e <= 0 or np.any(sigma2 < 0):
        raise ValueError("variances must be positive")
    V = sigma2_e * np.eye(data.n)
    for s2, k in zip(sigma2, active):
        eff = data.effects[k]
        Zk = eff.incidence
        V += Zk @ _effect_cov(eff, s2) @ Zk.T
    try:
        L = np.linalg.cholesky(V)
    except np.linalg.LinAlgError as exc:
        raise NumericError("marginal covariance not SPD") from exc
    return MarginalCovariance(V=V, chol=L)


def gls_lasso(data: MixedModelData, variances, lam: float,
              active: Optional[tuple] = None,
              unpenalized: Optional[frozenset] = None,
              cd_tol: float = 1e-9, cd_max_pass: int = 200_000) -> np.ndarray:
    """Minimizer of (y - X b)' V^{-1} (y - X b) + lam |b|_1 at known
    variances, via whitening and a unit-variance Lasso."""
    mc = marginal_covariance(data, variances, active=active)
    Xw = mc.whiten(data.X)
    yw = mc.whiten(data.y)
    if unpenalized is None:
        from .ecm import effective_unpenalized
        unpenalized = effective_unpenalized(
            data, tuple(range(data.q)) if active is None else active)
    cfg = SelectorConfig(lam=lam, unpenalized=unpenalized,
                         cd_tol=cd_tol, cd_max_pass=cd_max_pass)
    return lasso_cd(Xw, yw, 1.0, cfg).beta


def w_identity_check(data: MixedModelData, variances,
                     active: Optional[tuple] = None) -> float:
    """Max elementwise difference between
    W = R^{-1} - R^{-1} Z (Z' R^{-1} Z + G^{-1})^{-1} Z' R^{-1} and V^{-1},
    both formed densely."""
    sigma2, sigma2_e = variances
    sigma2 = np.asarray(sigma2, dtype=float)
    active = tuple(range(data.q)) if active is None else tuple(active)
    n = data.n
    mc = marginal_covariance(data, variances, active=active)
    v_inv = mc.solve(np.eye(n))
    if not active:
        return float(np.abs(np.eye(n) / sigma2_e - v_inv).max())
    Z = np.concatenate([data.effects[k].incidence for k in active], axis=1)
    g_inv_blocks = []
    for s2, k in zip(sigma2, active):
        eff = data.effects[k]
        inv = eff.a_inv if eff.a_inv is not None else np.eye(eff.n_levels)
        g_inv_blocks.append(inv / s2)
    G_inv = _block_diag(g_inv_blocks)
    inner = Z.T @ Z / sigma2_e + G_inv
    W = np.eye(n) / sigma2_e - (Z @ np.linalg.solve(inner, Z.T)) / sigma2_e ** 2
    return float(np.abs(W - v_inv).max())


def profiled_objective(data: MixedModelData, variances, beta, lam: float,
                       active: Optional[tuple] = None) -> tuple[float, float]:
    """Both sides of the profiled-objective identity: the complete-data
    objective h at u(beta) minimized in closed form, and the marginal
    quadratic form (y-Xb)' V^{-1} (y-Xb) + lam |b|_1."""
    sigma2, sigma2_e = variances
    sigma2 = np.asarray(sigma2, dtype=float)
    active = tuple(range(data.q)) if active is None else tuple(active)
    beta = np.asarray(beta, dtype=float)
    r = data.y - data.X @ beta
    if active:
        Z = np.concatenate([data.effects[k].incidence for k in active], axis=1)
        g_inv = _block_diag([
            (data.effects[k].a_inv if data.effects[k].a_inv is not None
             else np.eye(data.effects[k].n_levels)) / s2
            for s2, k in zip(sigma2, active)])
        inner = Z.T @ Z / sigma2_e + g_inv
        u = np.linalg.solve(inner, Z.T @ r / sigma2_e)
        e = r - Z @ u
        h = float(e @ e) / sigma2_e + float(u @ g_inv @ u) + lam * float(np.abs(beta).sum())
    else:
        h = float(r @ r) / sigma2_e + lam * float(np.abs(beta).sum())
    mc = marginal_covariance(data, variances, active=active)
    marginal = float(r @ mc.solve(r)) + lam * float(np.abs(beta).sum())
    return h, marginal


def _block_diag(blocks) -> np.ndarray:
    sizes = [b.shape[0] for b in blocks]
    out = np.zeros((sum(sizes), sum(sizes)))
    at = 0
    for b, s in zip(blocks, sizes):
        out[at:at + s, at:at + s] = b
        at += s
    return out
