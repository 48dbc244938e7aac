"""Outcome regressions m(x) = E(Y | x) fitted on the non-probability sample."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.special import expit

from .errors import ConvergenceError, InsufficientDataError
from .solvers import SolverConfig, WlsProblem, lasso_cd, lasso_path, lambda_max, wls_solve

__all__ = ["BasisSpec", "OutcomeFit", "fit_outcome", "fit_outcome_flexible", "predict", "logistic_irls"]


@dataclass(frozen=True)
class BasisSpec:
    """Expanded-basis descriptor.

    Each term is ``("main", j)``, ``("prod", j, k)``, ``("sq", j)`` or
    ``("hinge", j, knot)`` with covariate indices into the full covariate
    vector. Covariates are shifted by ``center`` before expansion, which
    keeps products and squares from being near-copies of the main effects.
    """

    terms: tuple
    center: tuple = ()

    def expand(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.center:
            x = x - np.asarray(self.center)
        cols = []
        for term in self.terms:
            kind, j = term[0], term[1]
            if kind == "main":
                cols.append(x[:, j])
            elif kind == "prod":
                cols.append(x[:, j] * x[:, term[2]])
            elif kind == "sq":
                cols.append(x[:, j] ** 2)
            elif kind == "hinge":
                cols.append(np.maximum(x[:, j] - term[2], 0.0))
            else:
                raise ValueError(f"unknown basis term {term!r}")
        return np.column_stack(cols) if cols else np.empty((x.shape[0], 0))

    @property
    def size(self) -> int:
        return len(self.terms)


@dataclass
class OutcomeFit:
    kind: str
    coef: np.ndarray
    subset: tuple[int, ...]
    p: int
    basis: BasisSpec | None = None
    diagnostics: dict = field(default_factory=dict)

    def design(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.p:
            raise ValueError(f"expected {self.p} covariates, got {x.shape[1]}")
        body = self.basis.expand(x) if self.basis is not None else x[:, list(self.subset)]
        return np.column_stack([np.ones(x.shape[0]), body])


def predict(fit: OutcomeFit, x) -> np.ndarray:
    eta = fit.design(x) @ fit.coef
    return expit(eta) if fit.kind == "logistic" else eta


def logistic_irls(x, y, w=None, *, tol=1e-10, max_iter=100, ridge_fallback=True):
    """Maximum-likelihood logistic regression by IRLS with step halving."""
    n, q = x.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)

    def nll(beta):
        eta = x @ beta
        return float(np.sum(w * (np.logaddexp(0.0, eta) - y * eta)))

    beta = np.zeros(q)
    cur = nll(beta)
    for it in range(1, max_iter + 1):
        p = expit(x @ beta)
        grad = x.T @ (w * (y - p))
        if np.max(np.abs(grad)) < tol * max(n, 1):
            return beta, it - 1
        v = np.clip(p * (1 - p), 1e-12, None)
        z = x @ beta + (y - p) / v
        new = wls_solve(WlsProblem(x, z, w * v, np.zeros(q)), SolverConfig(ridge_fallback=ridge_fallback))
        step = new - beta
        t = 1.0
        for _ in range(30):
            cand = nll(beta + t * step)
            if cand <= cur + 1e-12 * abs(cur):
                break
            t /= 2
        else:
            raise ConvergenceError("logistic IRLS line search failed", last=beta)
        beta = beta + t * step
        cur = nll(beta)
        if np.max(np.abs(t * step)) < 1e-12:
            return beta, it
    raise ConvergenceError("logistic IRLS did not converge", last=beta)


def _rows_a(sample, subset):
    subset = tuple(range(sample.p)) if subset is None else tuple(int(j) for j in subset)
    xa = sample.x_a[:, list(subset)]
    return subset, xa, sample.y_a


def fit_outcome(sample, family: str = "linear", subset=None, *, ridge_fallback=True) -> OutcomeFit:
    """OLS (``linear``) or logistic IRLS (``logistic``) of Y on A."""
    subset, xa, ya = _rows_a(sample, subset)
    x = np.column_stack([np.ones(len(ya)), xa])
    if family == "linear":
        if len(ya) < x.shape[1]:
            raise InsufficientDataError(
                f"{len(ya)} A units for {x.shape[1]} outcome coefficients"
            )
        coef = wls_solve(WlsProblem(x, ya, np.ones(len(ya)), np.zeros(x.shape[1])),
                         SolverConfig(ridge_fallback=ridge_fallback))
        diag = {"rss": float(np.sum((ya - x @ coef) ** 2))}
    elif family == "logistic":
        if not np.all(np.isin(ya, (0.0, 1.0))):
            raise ValueError("logistic outcome must be coded 0/1")
        coef, iters = logistic_irls(x, ya, ridge_fallback=ridge_fallback)
        diag = {"iterations": iters}
    else:
        raise ValueError(f"unknown family {family!r}")
    return OutcomeFit(kind=family, coef=coef, subset=subset, p=sample.p, diagnostics=diag)


def build_basis(x: np.ndarray, subset, tol: float = 1e-12) -> BasisSpec:
    """Main effects, pairwise products, squares and quartile hinges.

    Zero-variance covariates contribute nothing; columns that are constant
    or duplicate an earlier column are dropped.
    """
    center = x.mean(axis=0)
    x = x - center
    live = [j for j in subset if np.std(x[:, j]) > tol * max(1.0, abs(center[j]))]
    terms = [("main", j) for j in live]
    terms += [("prod", j, k) for j, k in combinations(live, 2)]
    terms += [("sq", j) for j in live]
    for j in live:
        for knot in np.unique(np.quantile(x[:, j], [0.25, 0.5, 0.75])):
            terms.append(("hinge", j, float(knot)))
    cols = BasisSpec(tuple(terms)).expand(x)
    kept, seen = [], []
    for t, col in zip(terms, cols.T):
        sd = np.std(col)
        if sd <= tol * max(1.0, np.abs(col).max()):
            continue
        z = (col - col.mean()) / sd
        if any(np.max(np.abs(z - s)) < 1e-9 for s in seen):
            continue
        seen.append(z)
        kept.append(t)
    return BasisSpec(tuple(kept), tuple(float(c) for c in center))


def fit_outcome_flexible(
    sample,
    penalty=None,
    rng=None,
    subset=None,
    *,
    v_folds: int = 5,
    n_lambda: int = 50,
    ratio: float = 1e-4,
    lambda_grid=None,
    config: SolverConfig | None = None,
) -> OutcomeFit:
    """Basis-expansion LASSO on A with lambda chosen by V-fold CV.

    Only ``v_folds`` is taken from ``penalty`` (a PenaltyConfig); its lambda
    grid belongs to the propensity model.
    """
    config = config or SolverConfig()
    subset, _, ya = _rows_a(sample, subset)
    xa_full = sample.x_a
    basis = build_basis(xa_full, subset)
    z = basis.expand(xa_full)
    x = np.column_stack([np.ones(len(ya)), z])
    pf = np.r_[0.0, np.ones(z.shape[1])]
    prob = WlsProblem(x, ya, np.ones(len(ya)), pf)
    if penalty is not None:
        v_folds = penalty.v_folds
    grid = lambda_grid
    if grid is None:
        lmax = lambda_max(prob, config)
        grid = np.geomspace(lmax, lmax * ratio, n_lambda) if lmax > 0 else np.array([0.0])
    grid = np.asarray(grid, dtype=float)

    rng = np.random.default_rng(0) if rng is None else rng
    n = len(ya)
    folds = np.empty(n, dtype=int)
    folds[rng.permutation(n)] = np.arange(n) % v_folds
    losses = np.zeros((v_folds, grid.size))
    if grid.size > 1:
        for v in range(v_folds):
            tr, te = folds != v, folds == v
            path = lasso_path(prob.subset_rows(tr), grid, config)
            resid = ya[te][:, None] - x[te] @ path.T
            losses[v] = np.mean(resid**2, axis=0)
    mean_loss = losses.mean(axis=0)
    best = int(np.argmin(mean_loss))
    lam = float(grid[best])
    if lam > 0:
        path = lasso_path(prob, grid[: best + 1], config)
        coef = lasso_cd(prob.with_lambda(lam), config, warm_start=path[-1])
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            coef = wls_solve(prob, config)
    diag = {
        "lambda": lam,
        "cv_loss": mean_loss.tolist(),
        "n_basis": basis.size,
        "n_active": int(np.count_nonzero(coef[1:])),
    }
    return OutcomeFit(kind="flexible", coef=coef, subset=subset, p=sample.p, basis=basis, diagnostics=diag)
