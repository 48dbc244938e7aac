"""Weighted least squares, coordinate-descent LASSO and SCAD (via LLA).

All penalised solvers minimise

    sum_i w_i (y_i - x_i'b)^2 + lam * sum_j pf_j |b_j|

Columns are standardised internally (weighted mean 0, weighted variance 1
when the design has an intercept column) so the penalty acts on
standardised coefficients. Coefficients are returned on the original scale.
A column whose penalty factor is 0 is unpenalised; by convention the
intercept is such a column.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConvergenceError, SingularMatrixError

__all__ = [
    "WlsProblem",
    "SolverConfig",
    "Standardizer",
    "soft_threshold",
    "wls_solve",
    "lasso_cd",
    "lasso_path",
    "lambda_max",
    "scad_derivative",
    "scad_lla",
    "scad_path",
]


@dataclass
class WlsProblem:
    xmat: np.ndarray
    y: np.ndarray
    w: np.ndarray
    penalty_factors: np.ndarray | None = None
    lambda_: float = 0.0

    def __post_init__(self):
        self.xmat = np.atleast_2d(np.asarray(self.xmat, dtype=float))
        n, q = self.xmat.shape
        self.y = np.asarray(self.y, dtype=float).reshape(n)
        self.w = np.asarray(self.w, dtype=float).reshape(n)
        if self.penalty_factors is None:
            pf = np.ones(q)
            pf[_intercept_columns(self.xmat)] = 0.0
            self.penalty_factors = pf
        self.penalty_factors = np.asarray(self.penalty_factors, dtype=float).reshape(q)
        if np.any(self.w <= 0) or not np.all(np.isfinite(self.w)):
            raise ValueError("observation weights must be positive and finite")
        if np.any(self.penalty_factors < 0) or np.any(np.isnan(self.penalty_factors)):
            raise ValueError("penalty factors must be non-negative")
        if self.lambda_ < 0:
            raise ValueError("lambda must be non-negative")

    @property
    def shape(self):
        return self.xmat.shape

    def with_lambda(self, lam: float) -> WlsProblem:
        return WlsProblem(self.xmat, self.y, self.w, self.penalty_factors, lam)

    def subset_rows(self, rows) -> WlsProblem:
        return WlsProblem(
            self.xmat[rows], self.y[rows], self.w[rows], self.penalty_factors, self.lambda_
        )


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-7
    max_iter: int = 10_000
    lla_iter: int = 3
    scad_a: float = 3.7
    standardize: bool = True
    ridge_fallback: bool = True

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.scad_a <= 2:
            raise ValueError("SCAD constant a must exceed 2")
        if self.max_iter < 1 or self.lla_iter < 1:
            raise ValueError("iteration limits must be positive")


DEFAULT_CONFIG = SolverConfig()


def soft_threshold(z: float, t: float) -> float:
    if t < 0:
        raise ValueError("threshold must be non-negative")
    return float(np.sign(z) * max(abs(z) - t, 0.0))


def _intercept_columns(x: np.ndarray) -> np.ndarray:
    return np.flatnonzero(np.all(x == 1.0, axis=0))


class Standardizer:
    """Affine map between original and standardised coefficient scales."""

    def __init__(self, x: np.ndarray, w: np.ndarray, enabled: bool = True):
        n, q = x.shape
        self.intercept = _intercept_columns(x)
        has_int = self.intercept.size > 0
        wn = w / w.sum()
        self.center = np.zeros(q)
        self.scale = np.ones(q)
        if has_int:
            self.center = wn @ x
            var = wn @ (x - self.center) ** 2
        else:
            var = wn @ x**2
        self.center[self.intercept] = 0.0
        var[self.intercept] = 1.0
        # relative cut so columns like 400 + tiny noise are not mistaken for constants
        colmag = np.maximum(np.abs(wn @ x), 1.0)
        self.dead = var <= (1e-13 * colmag) ** 2
        self.dead[self.intercept] = False
        if enabled:
            self.scale = np.where(self.dead, 1.0, np.sqrt(np.where(self.dead, 1.0, var)))
            self.scale[self.intercept] = 1.0
        else:
            self.center = np.zeros(q)
        self.enabled = enabled

    def transform(self, x: np.ndarray) -> np.ndarray:
        xs = (x - self.center) / self.scale
        xs[:, self.dead] = 0.0
        return xs

    def to_original(self, b: np.ndarray) -> np.ndarray:
        beta = b / self.scale
        beta[self.dead] = 0.0
        if self.intercept.size:
            k = self.intercept[0]
            beta[k] = b[k] - np.sum(np.delete(beta * self.center, self.intercept))
        return beta

    def to_standard(self, beta: np.ndarray) -> np.ndarray:
        b = beta * self.scale
        if self.intercept.size:
            k = self.intercept[0]
            b[k] = beta[k] + np.sum(np.delete(beta * self.center, self.intercept))
        return b


@njit(cache=True)
def _cd_kernel(G, c, pf, lam, b, tol, max_iter, yy, track):
    q = c.shape[0]
    grad = c - G @ b
    hist = np.empty(max_iter + 1 if track else 1)
    if track:
        hist[0] = yy - 2.0 * (c @ b) + b @ (G @ b) + lam * np.sum(pf * np.abs(b))
    for it in range(max_iter):
        maxd = 0.0
        for j in range(q):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            bj = b[j]
            rho = grad[j] + gjj * bj
            thr = 0.5 * lam * pf[j]
            if rho > thr:
                nb = (rho - thr) / gjj
            elif rho < -thr:
                nb = (rho + thr) / gjj
            else:
                nb = 0.0
            if nb != bj:
                diff = nb - bj
                for k in range(q):
                    grad[k] -= G[k, j] * diff
                b[j] = nb
                if abs(diff) > maxd:
                    maxd = abs(diff)
        if track:
            hist[it + 1] = yy - 2.0 * (c @ b) + b @ (G @ b) + lam * np.sum(pf * np.abs(b))
        if maxd < tol:
            return b, it + 1, True, hist[: it + 2] if track else hist
    return b, max_iter, False, hist


@njit(cache=True)
def _cd_path_kernel(G, c, pf, lams, tol, max_iter):
    L = lams.shape[0]
    q = c.shape[0]
    out = np.zeros((L, q))
    ok = np.ones(L, dtype=np.bool_)
    b = np.zeros(q)
    for i in range(L):
        b, _, conv, _ = _cd_kernel(G, c, pf, lams[i], b, tol, max_iter, 0.0, False)
        out[i] = b
        ok[i] = conv
    return out, ok


class _Gram:
    """Standardised Gram-form of a weighted least squares problem."""

    def __init__(self, prob: WlsProblem, config: SolverConfig):
        self.std = Standardizer(prob.xmat, prob.w, enabled=config.standardize)
        xs = self.std.transform(prob.xmat)
        xw = xs * prob.w[:, None]
        self.wsum = float(prob.w.sum())
        # response scaled to unit weighted spread so tol is relative to y
        ybar = prob.w @ prob.y / self.wsum if self.std.intercept.size else 0.0
        spread = np.sqrt(prob.w @ (prob.y - ybar) ** 2 / self.wsum)
        self.ys = float(spread) if config.standardize and spread > 0 else 1.0
        y = prob.y / self.ys
        self.G = np.ascontiguousarray(xs.T @ xw)
        self.c = xw.T @ y
        self.yy = float(prob.w @ y**2)
        pf = np.array(prob.penalty_factors, dtype=float)
        # infinite factor or dead column: coefficient pinned to zero
        self.pinned = self.std.dead | np.isinf(pf)
        pf[self.pinned] = 0.0
        self.pf = pf
        self.G_live = self.G.copy()
        self.G_live[self.pinned, :] = 0.0
        self.G_live[:, self.pinned] = 0.0
        self.c_live = np.where(self.pinned, 0.0, self.c)

    # Coefficients handled by the methods below are on the scaled-response
    # scale; lam is always given on the caller's scale.
    def scaled(self, lam):
        return float(lam) / self.ys

    def to_original(self, b):
        return self.std.to_original(b * self.ys)

    def to_standard(self, beta):
        return self.std.to_standard(beta) / self.ys

    def solve(self, lam, config, b0=None, track=False):
        q = self.c.shape[0]
        b = np.zeros(q) if b0 is None else np.array(b0, dtype=float)
        b[self.pinned] = 0.0
        b, iters, conv, hist = _cd_kernel(
            self.G_live, self.c_live, self.pf, self.scaled(lam), b, config.tol,
            config.max_iter, self.yy, track,
        )
        return b, iters, conv, hist

    def polish(self, b, lam):
        """Exact solve on the active set with signs fixed; keeps ``b`` if inconsistent."""
        lam = self.scaled(lam)
        act = np.flatnonzero(b != 0)
        if act.size == 0:
            return b
        rhs = self.c_live[act] - 0.5 * lam * self.pf[act] * np.sign(b[act])
        try:
            sol = np.linalg.solve(self.G_live[np.ix_(act, act)], rhs)
        except np.linalg.LinAlgError:
            return b
        pen = self.pf[act] > 0
        if np.any(np.sign(sol[pen]) != np.sign(b[act][pen])):
            return b
        cand = np.zeros_like(b)
        cand[act] = sol
        grad = self.c_live - self.G_live @ cand
        inact = np.setdiff1d(np.flatnonzero(~self.pinned), act)
        slack = 1e-9 * max(1.0, np.max(np.abs(self.c_live)))
        if np.any(2 * np.abs(grad[inact]) > lam * self.pf[inact] + slack):
            return b
        return cand

    def objective(self, b, lam):
        lam = self.scaled(lam)
        return self.yy - 2 * self.c @ b + b @ self.G @ b + lam * np.sum(self.pf * np.abs(b))


def _normal_solve(x, y, w, ridge_fallback=True):
    xw = x * w[:, None]
    A = x.T @ xw
    rhs = xw.T @ y
    q = A.shape[0]
    sw = np.sqrt(w)[:, None] * x
    rank = np.linalg.matrix_rank(sw) if q else 0
    if rank < q:
        if not ridge_fallback:
            raise SingularMatrixError(f"normal equations are singular (rank {rank} < {q})")
        warnings.warn("singular normal equations; adding a small ridge", RuntimeWarning, stacklevel=3)
        A = A + 1e-8 * np.trace(A) / q * np.eye(q)
        return np.linalg.solve(A, rhs)
    # least squares on the weighted design is better conditioned than solving X'WX directly
    sol, *_ = np.linalg.lstsq(sw, np.sqrt(w) * y, rcond=None)
    return sol


def wls_solve(prob: WlsProblem, config: SolverConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Unpenalised weighted least squares (the problem's lambda is ignored)."""
    return _normal_solve(prob.xmat, prob.y, prob.w, config.ridge_fallback)


def lambda_max(prob: WlsProblem, config: SolverConfig = DEFAULT_CONFIG) -> float:
    """Smallest lambda at which every penalised coefficient is zero."""
    gram = _Gram(prob, config)
    pen = (gram.pf > 0) & ~gram.pinned
    if not pen.any():
        return 0.0
    free = np.flatnonzero((gram.pf == 0) & ~gram.pinned)
    b = np.zeros_like(gram.c)
    if free.size:
        b[free] = np.linalg.lstsq(gram.G[np.ix_(free, free)], gram.c[free], rcond=None)[0]
    grad = gram.c - gram.G @ b
    return float(np.max(2 * np.abs(grad[pen]) / gram.pf[pen])) * gram.ys


def lasso_cd(
    prob: WlsProblem,
    config: SolverConfig = DEFAULT_CONFIG,
    *,
    warm_start: np.ndarray | None = None,
    return_history: bool = False,
):
    """Coordinate-descent LASSO with per-coefficient penalty factors.

    Returns the coefficient vector on the original scale; with
    ``return_history`` also the objective value after every sweep (on the
    standardised scale). Raises :class:`ConvergenceError` carrying the last
    iterate after ``config.max_iter`` sweeps.
    """
    gram = _Gram(prob, config)
    pen = (gram.pf > 0) & ~gram.pinned
    if prob.lambda_ == 0 or not pen.any():
        keep = ~gram.pinned
        beta = np.zeros(prob.shape[1])
        beta[keep] = _normal_solve(prob.xmat[:, keep], prob.y, prob.w, config.ridge_fallback)
        return (beta, np.array([])) if return_history else beta
    b0 = None if warm_start is None else gram.to_standard(np.asarray(warm_start, float))
    b, iters, conv, hist = gram.solve(prob.lambda_, config, b0=b0, track=return_history)
    if not conv:
        raise ConvergenceError(
            f"coordinate descent did not converge in {config.max_iter} sweeps",
            last=gram.to_original(b),
        )
    b = gram.polish(b, prob.lambda_)
    beta = gram.to_original(b)
    return (beta, hist) if return_history else beta


def lasso_path(prob: WlsProblem, lambdas, config: SolverConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Warm-started solutions along ``lambdas``; one row per value, original scale."""
    gram = _Gram(prob, config)
    lams = np.asarray(lambdas, dtype=float)
    bs, ok = _cd_path_kernel(gram.G_live, gram.c_live, gram.pf, lams / gram.ys, config.tol,
                             config.max_iter)
    if not ok.all():
        bad = lams[~ok][0]
        raise ConvergenceError(f"coordinate descent did not converge at lambda={bad:g}")
    return np.array([gram.to_original(b) for b in bs])


def scad_derivative(b_abs, lam: float, a: float = 3.7) -> np.ndarray:
    """Derivative of the SCAD penalty at ``|b|``."""
    b_abs = np.abs(np.asarray(b_abs, dtype=float))
    return np.where(b_abs <= lam, lam, np.maximum(a * lam - b_abs, 0.0) / (a - 1.0))


def _scad_rounds(gram: _Gram, lam, config, b=None):
    # SCAD thresholds are compared with standardised coefficients under the
    # loss normalised by 2 * sum(w); lam_unit is lam on that scale.
    lam = gram.scaled(lam)
    lam_unit = lam / (2.0 * gram.wsum)
    base = gram.pf.copy()
    pen = base > 0
    if b is None:
        b = np.zeros_like(gram.c)
    for _ in range(config.lla_iter):
        deriv = scad_derivative(b, lam_unit, config.scad_a)
        pf = np.where(pen, base * deriv / lam_unit, 0.0)
        b, _, conv, _ = _cd_kernel(
            gram.G_live, gram.c_live, pf, float(lam), b.copy(), config.tol,
            config.max_iter, gram.yy, False,
        )
        if not conv:
            raise ConvergenceError("SCAD inner LASSO did not converge", last=gram.to_original(b))
    return b


def scad_lla(prob: WlsProblem, config: SolverConfig = DEFAULT_CONFIG) -> np.ndarray:
    """SCAD-penalised weighted least squares by local linear approximation.

    Starts at zero, so the first round is a plain LASSO; each later round
    re-weights the penalty factors by the SCAD derivative at the previous
    standardised coefficients.
    """
    if prob.lambda_ == 0:
        return lasso_cd(prob, config)
    gram = _Gram(prob, config)
    b = _scad_rounds(gram, prob.lambda_, config)
    return gram.to_original(b)


def scad_path(prob: WlsProblem, lambdas, config: SolverConfig = DEFAULT_CONFIG) -> np.ndarray:
    gram = _Gram(prob, config)
    out = []
    for lam in np.asarray(lambdas, dtype=float):
        out.append(gram.to_original(_scad_rounds(gram, lam, config)))
    return np.array(out)
