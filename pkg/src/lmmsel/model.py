"""Data objects for the grouped linear mixed model.

A model instance bundles the response, the fixed-effect design, and one
incidence matrix per random effect.  Effects may carry an interaction
covariate (the incidence column is scaled by it) and, optionally, a known
symmetric positive-definite relationship matrix between the levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Row/column dimensions of the supplied arrays do not agree."""


class DegenerateColumnError(ValueError):
    """A penalized design column is constant (or identically zero)."""


@dataclass(frozen=True)
class GroupingFactor:
    """Partition of the observations into ``level_count`` groups.

    ``assignment`` holds 1-based level indices; every level must occur at
    least once.
    """

    assignment: np.ndarray
    level_count: int
    labels: Optional[tuple] = None

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        object.__setattr__(self, "assignment", a)
        if self.level_count <= 0:
            raise ValueError("level_count must be positive")
        if a.ndim != 1 or a.size == 0:
            raise DimensionError("assignment must be a nonempty vector")
        if a.min() < 1 or a.max() > self.level_count:
            raise ValueError("levels must lie in 1..level_count")
        present = np.unique(a)
        if present.size != self.level_count:
            missing = sorted(set(range(1, self.level_count + 1)) - set(present.tolist()))
            raise ValueError(f"levels with no observation: {missing}")

    @property
    def n(self) -> int:
        return self.assignment.size

    def level_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment - 1, minlength=self.level_count)

    @classmethod
    def from_labels(cls, raw: Sequence) -> "GroupingFactor":
        """Map arbitrary hashable labels to dense 1-based levels."""
        labels = sorted(set(raw), key=str)
        index = {lab: i + 1 for i, lab in enumerate(labels)}
        assignment = np.array([index[v] for v in raw], dtype=np.int64)
        return cls(assignment, len(labels), labels=tuple(labels))


def build_incidence(factor: GroupingFactor, covariate: Optional[np.ndarray] = None) -> np.ndarray:
    """Incidence matrix of ``factor``; entry (i, j) is the covariate value
    (1 without a covariate) when observation i sits at level j, else 0."""
    n = factor.n
    if covariate is not None:
        covariate = np.asarray(covariate, dtype=float)
        if covariate.shape != (n,):
            raise DimensionError(f"covariate length {covariate.shape} != {n}")
        values = covariate
    else:
        values = np.ones(n)
    Z = np.zeros((n, factor.level_count))
    Z[np.arange(n), factor.assignment - 1] = values
    return Z


@dataclass(frozen=True)
class RandomEffectSpec:
    """One random effect: a grouping factor, an optional interaction
    covariate, and an optional level relationship matrix A.

    ``covariate_index`` records which fixed-design column generated the
    covariate; while the effect is active that column is exempt from the
    l1 penalty.
    """

    factor: GroupingFactor
    covariate: Optional[np.ndarray] = None
    relationship: Optional[np.ndarray] = None
    covariate_index: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        if self.covariate is not None:
            cov = np.asarray(self.covariate, dtype=float)
            if cov.shape != (self.factor.n,):
                raise DimensionError("covariate length does not match factor")
            object.__setattr__(self, "covariate", cov)
        object.__setattr__(self, "_incidence", build_incidence(self.factor, self.covariate))
        if self.relationship is not None:
            A = np.asarray(self.relationship, dtype=float)
            nk = self.factor.level_count
            if A.shape != (nk, nk):
                raise DimensionError("relationship matrix has wrong shape")
            if not np.allclose(A, A.T, atol=1e-10):
                raise ValueError("relationship matrix must be symmetric")
            try:
                chol = np.linalg.cholesky(A)
            except np.linalg.LinAlgError as exc:
                raise ValueError("relationship matrix must be positive definite") from exc
            object.__setattr__(self, "relationship", A)
            a_inv = np.linalg.inv(A)
            a_inv = 0.5 * (a_inv + a_inv.T)
            object.__setattr__(self, "_a_inv", a_inv)
            object.__setattr__(self, "_logdet_a", 2.0 * np.log(np.diag(chol)).sum())
        else:
            object.__setattr__(self, "_a_inv", None)
            object.__setattr__(self, "_logdet_a", 0.0)

    @property
    def n_levels(self) -> int:
        return self.factor.level_count

    @property
    def incidence(self) -> np.ndarray:
        return self._incidence

    @property
    def a_inv(self) -> Optional[np.ndarray]:
        """Cached inverse of the relationship matrix (None for identity)."""
        return self._a_inv

    @property
    def logdet_a(self) -> float:
        return self._logdet_a


@dataclass(frozen=True)
class MixedModelData:
    """Immutable container for one model: y (n), X (n x p), random effects."""

    y: np.ndarray
    X: np.ndarray
    effects: tuple = ()
    unpenalized: frozenset = frozenset()
    column_names: Optional[tuple] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "effects", tuple(self.effects))
        object.__setattr__(self, "unpenalized", frozenset(self.unpenalized))
        if X.ndim != 2 or X.shape[0] != y.size:
            raise DimensionError("X must be n x p with n matching y")
        for eff in self.effects:
            if eff.factor.n != y.size:
                raise DimensionError("effect factor length does not match y")
            if eff.covariate_index is not None and not (0 <= eff.covariate_index < X.shape[1]):
                raise DimensionError("covariate_index out of range")
        for j in self.unpenalized:
            if not (0 <= j < X.shape[1]):
                raise DimensionError("unpenalized index out of range")
        if self.column_names is not None:
            names = tuple(self.column_names)
            if len(names) != X.shape[1]:
                raise DimensionError("column_names length != p")
            object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "_Z", None)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return len(self.effects)

    @property
    def N(self) -> int:
        return sum(e.n_levels for e in self.effects)

    def effect_sizes(self) -> tuple:
        return tuple(e.n_levels for e in self.effects)

    @property
    def Z(self) -> np.ndarray:
        """Column concatenation of all incidence matrices, effect order."""
        if self._Z is None:
            if self.q == 0:
                Z = np.zeros((self.n, 0))
            else:
                Z = np.concatenate([e.incidence for e in self.effects], axis=1)
            object.__setattr__(self, "_Z", Z)
        return self._Z

    def names(self) -> tuple:
        if self.column_names is not None:
            return self.column_names
        return tuple(f"x{j + 1}" for j in range(self.p))


def standardize(X: np.ndarray, skip: frozenset | set = frozenset()):
    """Center non-skipped columns and scale them to unit second moment.

    Returns (X_std, centers, scales); skipped columns come back verbatim
    with center 0 and scale 1, so beta maps back via b / scale and an
    intercept shift of sum(center * b / scale).
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    centers = np.zeros(p)
    scales = np.ones(p)
    out = X.copy()
    for j in range(p):
        if j in skip:
            continue
        c = X[:, j].mean()
        col = X[:, j] - c
        s = np.sqrt((col ** 2).mean())
        if s < 1e-12:
            raise DegenerateColumnError(f"column {j} is constant")
        centers[j] = c
        scales[j] = s
        out[:, j] = col / s
    return out, centers, scales
