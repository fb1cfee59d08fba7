"""Least-squares conditional expectations on path state variables."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, asdict

import numpy as np


class RankDeficientError(np.linalg.LinAlgError):
    """Raised when a regression design is too ill-conditioned."""

    def __init__(self, cond: float, limit: float, where: str = ""):
        self.cond = cond
        self.limit = limit
        super().__init__(f"regression design{(' at ' + where) if where else ''} has condition number {cond:.3e} > {limit:.1e}")


@dataclass(frozen=True)
class RegressionSpec:
    """Basis configuration.

    Attributes:
        kind: ``"poly"`` (total-degree monomials) or ``"spline"`` (additive
            piecewise-linear with quantile knots).
        degree: Total degree for ``"poly"``.
        knots: Number of interior knots per variable for ``"spline"``.
        cond_max: Largest accepted condition number of the design.
        strict: Raise on ill-conditioning; otherwise truncate small singular
            values and flag the step.
    """

    kind: str = "poly"
    degree: int = 3
    knots: int = 12
    cond_max: float = 1e12
    strict: bool = True

    def __post_init__(self):
        if self.kind not in ("poly", "spline"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0 or self.knots < 0:
            raise ValueError("degree and knots must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _informative_columns(state: np.ndarray) -> np.ndarray:
    """Standardized state columns with constants and duplicates removed."""
    if state.size == 0:
        return np.zeros((state.shape[0], 0))
    mean = state.mean(axis=0)
    std = state.std(axis=0)
    keep = []
    cols = []
    for j in range(state.shape[1]):
        if std[j] <= 1e-12 * (1.0 + abs(mean[j])):
            continue
        z = (state[:, j] - mean[j]) / std[j]
        if any(np.allclose(z, c, rtol=0, atol=1e-10) for c in cols):
            continue
        keep.append(j)
        cols.append(z)
    return np.stack(cols, axis=1) if cols else np.zeros((state.shape[0], 0))


def design_matrix(state: np.ndarray, spec: RegressionSpec) -> np.ndarray:
    """Basis functions evaluated on ``state`` (``(n, d)``); first column is constant."""
    state = np.asarray(state, dtype=float).reshape(state.shape[0], -1)
    z = _informative_columns(state)
    n, d = z.shape
    feats = [np.ones(n)]
    if d == 0:
        return np.stack(feats, axis=1)
    if spec.kind == "poly":
        caps = [min(spec.degree, np.unique(z[:, j]).size - 1) for j in range(d)]
        powers = [[np.ones(n)] for _ in range(d)]
        for j in range(d):
            for p in range(1, caps[j] + 1):
                powers[j].append(powers[j][-1] * z[:, j])
        for total in range(1, spec.degree + 1):
            for exps in itertools.product(*[range(c + 1) for c in caps]):
                if sum(exps) != total:
                    continue
                col = np.ones(n)
                for j, e in enumerate(exps):
                    if e:
                        col = col * powers[j][e]
                feats.append(col)
    else:
        for j in range(d):
            x = z[:, j]
            feats.append(x)
            if spec.knots:
                qs = np.quantile(x, np.linspace(0, 1, spec.knots + 2)[1:-1])
                for q in np.unique(qs):
                    col = np.maximum(x - q, 0.0)
                    if col.std() > 1e-12:
                        feats.append(col)
    return np.stack(feats, axis=1)


class Projector:
    """Orthogonal projection onto the span of a design matrix."""

    def __init__(self, design: np.ndarray, spec: RegressionSpec, where: str = ""):
        u, s, _ = np.linalg.svd(design, full_matrices=False)
        self.cond = float(s[0] / s[-1]) if s[-1] > 0 else float("inf")
        self.size = design.shape[1]
        self.rank_deficient = self.cond > spec.cond_max
        if self.rank_deficient:
            if spec.strict:
                raise RankDeficientError(self.cond, spec.cond_max, where)
            u = u[:, s > s[0] / spec.cond_max]
        self._u = u

    def __call__(self, b: np.ndarray) -> np.ndarray:
        return self._u @ (self._u.T @ b)

    @property
    def leverage(self) -> np.ndarray:
        """Diagonal of the hat matrix."""
        return np.sum(self._u**2, axis=1)

    def fitted_variance(self, b: np.ndarray) -> np.ndarray:
        """Heteroscedasticity-robust estimate of the mean variance of the fitted values.

        Uses ``mean_i Var(fit_i) ~ mean_k e_k^2 h_kk`` (column-wise for 2-d ``b``).
        """
        e = b - self(b)
        h = self.leverage
        return np.mean((e**2) * (h[:, None] if e.ndim == 2 else h), axis=0)


def projector(state: np.ndarray, spec: RegressionSpec, where: str = "") -> Projector:
    return Projector(design_matrix(state, spec), spec, where)


def conditional_expectation(state: np.ndarray, target: np.ndarray, spec: RegressionSpec) -> np.ndarray:
    """Regression estimate of ``E[target | state]`` on each path."""
    return projector(state, spec)(target)
