"""Henderson-system linear algebra for the conditional mean of the random
effects.

Everything here works on the N x N system (Z'Z + Gamma) u = Z'(y - X b),
never on an n x n matrix; the dense-factorization sizes are recorded so
tests can assert that.  Gamma holds one variance ratio gamma_k =
sigma_e^2 / sigma_k^2 per active effect; with a relationship matrix A the
identity block becomes gamma_k * A^{-1} and squared norms of u_k become
u_k' A^{-1} u_k.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import MixedModelData


class NumericError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Instrumentation: sizes of dense symmetric factorizations
# ---------------------------------------------------------------------------

_DIM_LOGS: list[list[int]] = []


def _note_factorization(dim: int) -> None:
    for log in _DIM_LOGS:
        log.append(dim)


@contextmanager
def track_factorizations():
    """Collect the dimension of every dense factorization performed inside
    the with-block (Henderson solves and the determinant route)."""
    log: list[int] = []
    _DIM_LOGS.append(log)
    try:
        yield log
    finally:
        _DIM_LOGS.remove(log)


# ---------------------------------------------------------------------------
# Gamma
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GammaMatrix:
    """Variance ratios gamma_k = sigma_e^2 / sigma_k^2 for the active effects.

    ``active`` holds indices into ``data.effects``; block k of the full
    matrix is gamma_k * I (or gamma_k * A_k^{-1}).
    """

    active: tuple
    gammas: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gammas, dtype=float)
        object.__setattr__(self, "gammas", g)
        object.__setattr__(self, "active", tuple(self.active))
        if g.shape != (len(self.active),):
            raise ValueError("one gamma per active effect required")
        if not np.all(np.isfinite(g)) or np.any(g <= 0):
            raise ValueError("gammas must be finite and positive")

    @classmethod
    def from_variances(cls, active, sigma2, sigma2_e) -> "GammaMatrix":
        sigma2 = np.asarray(sigma2, dtype=float)
        return cls(tuple(active), sigma2_e / sigma2)


@dataclass
class BlupResult:
    """Solution of the Henderson system plus the block bookkeeping the
    variance updates need."""

    u: np.ndarray
    u_by_effect: dict
    traces: dict          # k -> tr(T_kk A_k^{-1})
    unorm2: dict          # k -> u_k' A_k^{-1} u_k
    cond_trace: float     # tr(Z (Z'Z+Gamma)^{-1} Z')
    factor: "HendersonFactor"


class HendersonFactor:
    """Cholesky factorization of C = Z'Z + Gamma for one active set,
    reusable across both E-steps of an ECM iteration."""

    def __init__(self, data: MixedModelData, gamma: GammaMatrix):
        if not gamma.active:
            raise ValueError("active effect set is empty")
        self.data = data
        self.gamma = gamma
        effects = [data.effects[k] for k in gamma.active]
        sizes = [e.n_levels for e in effects]
        self.sizes = sizes
        self.N = sum(sizes)
        offs = np.concatenate([[0], np.cumsum(sizes)])
        self.offsets = {k: (offs[i], offs[i + 1]) for i, k in enumerate(gamma.active)}
        Z = np.concatenate([e.incidence for e in effects], axis=1)
        self.Z = Z
        C = Z.T @ Z
        for i, k in enumerate(gamma.active):
            lo, hi = self.offsets[k]
            eff = effects[i]
            if eff.a_inv is not None:
                C[lo:hi, lo:hi] += gamma.gammas[i] * eff.a_inv
            else:
                C[lo:hi, lo:hi] += gamma.gammas[i] * np.eye(sizes[i])
        _note_factorization(self.N)
        try:
            self._cf = cho_factor(C, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            cond = np.linalg.cond(C)
            raise NumericError(f"Henderson system not SPD (cond ~ {cond:.3e})") from exc
        self.logdet = 2.0 * np.log(np.diag(self._cf[0])).sum()
        self._Cinv = cho_solve(self._cf, np.eye(self.N), check_finite=False)
        # per-block traces in the metric of the variance updates
        self.traces = {}
        cond_trace = float(self.N)
        for i, k in enumerate(gamma.active):
            lo, hi = self.offsets[k]
            block = self._Cinv[lo:hi, lo:hi]
            eff = effects[i]
            tr = float(np.trace(block @ eff.a_inv)) if eff.a_inv is not None \
                else float(np.trace(block))
            self.traces[k] = tr
            cond_trace -= gamma.gammas[i] * tr
        self.cond_trace = cond_trace

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve(self._cf, rhs, check_finite=False)

    def quad_form(self, v: np.ndarray) -> float:
        """v' C^{-1} v for an N-vector v."""
        return float(v @ self.solve(v))

    def blup(self, beta: np.ndarray, rhs: Optional[np.ndarray] = None) -> BlupResult:
        """u = C^{-1} Z'(y - X beta); ``rhs`` overrides Z'(y - X beta) when
        the caller has it precomputed."""
        data = self.data
        if rhs is None:
            rhs = self.Z.T @ (data.y - data.X @ beta)
        u = self.solve(rhs)
        u_by, unorm2 = {}, {}
        for k in self.gamma.active:
            lo, hi = self.offsets[k]
            uk = u[lo:hi]
            u_by[k] = uk
            a_inv = data.effects[k].a_inv
            unorm2[k] = float(uk @ a_inv @ uk) if a_inv is not None else float(uk @ uk)
        return BlupResult(u=u, u_by_effect=u_by, traces=dict(self.traces),
                          unorm2=unorm2, cond_trace=self.cond_trace, factor=self)


def henderson_solve(data: MixedModelData, gamma: GammaMatrix, beta: np.ndarray) -> BlupResult:
    """BLUP of the active random effects at fixed parameters, via one
    N x N SPD solve."""
    return HendersonFactor(data, gamma).blup(np.asarray(beta, dtype=float))


def blup_marginal_oracle(data: MixedModelData, variances, beta,
                         active: Optional[tuple] = None) -> np.ndarray:
    """Independent route for testing: u = G Z' V^{-1} (y - X beta) with the
    dense n x n marginal covariance V."""
    sigma2, sigma2_e = variances
    sigma2 = np.asarray(sigma2, dtype=float)
    active = tuple(range(data.q)) if active is None else tuple(active)
    if len(sigma2) != len(active):
        raise ValueError("one variance per active effect required")
    n = data.n
    V = sigma2_e * np.eye(n)
    parts = []
    for s2, k in zip(sigma2, active):
        eff = data.effects[k]
        Zk = eff.incidence
        Gk = s2 * (eff.relationship if eff.relationship is not None else np.eye(eff.n_levels))
        V += Zk @ Gk @ Zk.T
        parts.append(Gk @ Zk.T)
    r = data.y - data.X @ np.asarray(beta, dtype=float)
    try:
        cf = cho_factor(V, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericError("marginal covariance not SPD") from exc
    vinv_r = cho_solve(cf, r)
    return np.concatenate([part @ vinv_r for part in parts]) if parts else np.zeros(0)
