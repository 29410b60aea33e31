"""Shared builders for randomized mixed-model test instances."""

import numpy as np
import pytest

from lmmsel import GroupingFactor, MixedModelData, RandomEffectSpec


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))


def random_factor(rng, n, levels) -> GroupingFactor:
    """A factor guaranteed to hit every level at least once."""
    assignment = np.concatenate([np.arange(1, levels + 1),
                                 rng.integers(1, levels + 1, size=n - levels)])
    rng.shuffle(assignment)
    return GroupingFactor(assignment, levels)


def random_instance(seed, n=40, p=12, q=2, levels=(5, 4), sparsity=4,
                    with_relationship=False, interaction=True):
    """One synthetic model with known generating parameters.

    Returns (data, truth) where truth holds beta, per-effect variances and
    the residual variance used to draw y.
    """
    rng = rng_for(seed)
    X = np.empty((n, p))
    X[:, 0] = 1.0
    X[:, 1:] = rng.standard_normal((n, p - 1))
    effects = []
    for k in range(q):
        factor = random_factor(rng, n, levels[k])
        cov = X[:, k + 1] if (interaction and k > 0) else None
        rel = None
        if with_relationship and k == 0:
            B = rng.standard_normal((levels[k], levels[k]))
            rel = B @ B.T + levels[k] * np.eye(levels[k])
        effects.append(RandomEffectSpec(factor=factor, covariate=cov, relationship=rel,
                                        covariate_index=None if cov is None else k + 1,
                                        name=f"u{k + 1}"))
    beta = np.zeros(p)
    beta[:sparsity] = rng.uniform(0.5, 1.5, size=sparsity) * rng.choice([-1.0, 1.0], size=sparsity)
    sigma2 = rng.uniform(0.5, 1.5, size=q)
    sigma2_e = float(rng.uniform(0.5, 1.5))
    y = X @ beta
    for k, eff in enumerate(effects):
        if eff.relationship is not None:
            L = np.linalg.cholesky(eff.relationship)
            u_k = np.sqrt(sigma2[k]) * (L @ rng.standard_normal(eff.n_levels))
        else:
            u_k = np.sqrt(sigma2[k]) * rng.standard_normal(eff.n_levels)
        y = y + eff.incidence @ u_k
    y = y + np.sqrt(sigma2_e) * rng.standard_normal(n)
    data = MixedModelData(y=y, X=X, effects=tuple(effects), unpenalized=frozenset({0}))
    truth = {"beta": beta, "sigma2": sigma2, "sigma2_e": sigma2_e}
    return data, truth


@pytest.fixture
def small_instance():
    return random_instance(11)
