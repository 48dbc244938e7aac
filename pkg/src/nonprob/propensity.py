"""Propensity of entering the non-probability sample, P(delta = 1 | x).

The selection model is logistic and is fitted by maximising the
design-weighted pseudo log-likelihood

    l(beta) = sum_A x_i'beta - sum_B d_i log(1 + exp(x_i'beta))

(equivalently minimising the pseudo-risk ``-l``). Variable selection works
on the weighted least-squares form of one Newton step (working response
``ystar`` with weights ``d p (1 - p)`` on B), penalised by a LASSO, an
outcome-adaptive LASSO or SCAD.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConvergenceError, DegenerateModelError, InsufficientDataError, SeparationError
from .outcome import fit_outcome, logistic_irls
from .sample import CombinedSample, PositivityConfig, design_matrix
from .solvers import (
    SolverConfig,
    Standardizer,
    WlsProblem,
    lambda_max,
    lasso_cd,
    lasso_path,
    scad_lla,
    scad_path,
)

__all__ = [
    "PropensityFit",
    "PenaltyConfig",
    "WorkingResponse",
    "CvResult",
    "pseudo_risk",
    "pseudo_gradient",
    "fit_newton",
    "working_response",
    "outcome_coefficients",
    "adaptive_factors",
    "assign_folds",
    "lambda_grid",
    "cv_wls",
    "cv_lambda",
    "fit_lasso",
    "fit_oalasso",
    "fit_scad_union",
    "fit_collaborative",
]

P_UPPER = 1.0 - 1e-12


@dataclass
class PenaltyConfig:
    lambda_grid: np.ndarray | None = None
    gamma: float = 1.0
    v_folds: int = 5
    fold_labels: np.ndarray | None = None
    n_lambda: int = 50
    lambda_ratio: float = 1e-4

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.v_folds < 2:
            raise ValueError("need at least two folds")
        if self.lambda_grid is not None:
            grid = np.atleast_1d(np.asarray(self.lambda_grid, dtype=float))
            if np.any(grid < 0) or np.any(np.diff(grid) >= 0):
                raise ValueError("lambda grid must be non-negative and strictly descending")
            self.lambda_grid = grid


@dataclass
class CvResult:
    lambda_: float
    grid: np.ndarray
    mean_loss: np.ndarray
    fold_losses: np.ndarray
    folds: np.ndarray

    def to_dict(self):
        return {
            "lambda": self.lambda_,
            "grid": self.grid.tolist(),
            "mean_loss": self.mean_loss.tolist(),
            "fold_losses": self.fold_losses.tolist(),
        }


@dataclass
class WorkingResponse:
    ystar: np.ndarray
    w: np.ndarray
    clamp_count: int = 0


@dataclass
class PropensityFit:
    beta: np.ndarray
    subset: tuple[int, ...]
    active_set: tuple[int, ...]
    p_a: np.ndarray
    p_b: np.ndarray
    converged: bool
    iterations: int
    method: str
    design_a: np.ndarray
    design_b: np.ndarray
    lambda_: float | None = None
    penalty_factors: np.ndarray | None = None
    cv: CvResult | None = None
    clamp_count: int = 0
    info: dict = field(default_factory=dict)

    def full_beta(self, p: int) -> np.ndarray:
        """Coefficients expanded to (intercept, x1..xp), zeros elsewhere."""
        out = np.zeros(p + 1)
        out[0] = self.beta[0]
        out[1 + np.asarray(self.subset, dtype=int)] = self.beta[1:]
        return out

    def metadata(self) -> dict:
        meta = {
            "method": self.method,
            "active_set": list(self.active_set),
            "design_columns": ["intercept"] + [int(j) for j in self.subset],
            "converged": self.converged,
            "iterations": self.iterations,
            "clamp_count": self.clamp_count,
        }
        if self.lambda_ is not None:
            meta["lambda"] = self.lambda_
        if self.cv is not None:
            meta["cv"] = self.cv.to_dict()
        meta.update(self.info)
        return meta


def _clamp(p, eps):
    lo = p < eps
    hi = p > P_UPPER
    return np.clip(p, eps, P_UPPER), int(lo.sum() + hi.sum())


def pseudo_risk(beta, xa, xb, d) -> float:
    """Negative pseudo log-likelihood; the Newton fit minimises this."""
    return float(np.sum(d * np.logaddexp(0.0, xb @ beta)) - np.sum(xa @ beta))


def pseudo_gradient(beta, xa, xb, d) -> np.ndarray:
    """Gradient of the pseudo log-likelihood, sum_A x - sum_B d p x."""
    return xa.sum(axis=0) - xb.T @ (d * expit(xb @ beta))


def _newton(xa, xb, d, *, tol=1e-8, max_iter=200, max_halving=30, separation_norm=50.0):
    """Pseudo-likelihood Newton-Raphson with step halving, from beta = 0.

    Works on standardised columns and returns original-scale coefficients.
    """
    std = Standardizer(xb, d)
    if std.dead.any():
        raise DegenerateModelError("a propensity covariate is constant on B")
    za, zb = std.transform(xa), std.transform(xb)
    n_b = xb.shape[0]
    b = np.zeros(xb.shape[1])
    risk = pseudo_risk(b, za, zb, d)
    for it in range(max_iter + 1):
        beta = std.to_original(b)
        grad = pseudo_gradient(beta, xa, xb, d)
        if np.max(np.abs(grad)) < tol * n_b:
            return beta, it, True
        p = expit(zb @ b)
        hess = zb.T @ (zb * (d * p * (1 - p))[:, None])
        g = za.sum(axis=0) - zb.T @ (d * p)
        try:
            step = np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, g, rcond=None)[0]
        if np.max(np.abs(step)) < 1e-13 * max(1.0, np.max(np.abs(b))):
            return beta, it, True
        t = 1.0
        for _ in range(max_halving):
            cand = pseudo_risk(b + t * step, za, zb, d)
            if cand <= risk + 1e-13 * abs(risk):
                break
            t /= 2
        else:
            raise ConvergenceError("pseudo-risk line search failed after step halving", last=beta)
        b = b + t * step
        risk = cand
        if np.linalg.norm(b) > separation_norm and np.max(np.abs(grad)) > 1e-3 * n_b:
            raise SeparationError("propensity coefficients diverging; samples look separable",
                                  last=std.to_original(b))
    raise ConvergenceError(f"Newton-Raphson did not converge in {max_iter} iterations",
                           last=std.to_original(b))


def _make_fit(sample, beta, xa, xb, subset, active, method, eps, **kw):
    pa, ca = _clamp(expit(xa @ beta), eps)
    pb, cb = _clamp(expit(xb @ beta), eps)
    return PropensityFit(
        beta=beta, subset=tuple(int(j) for j in subset), active_set=tuple(int(j) for j in active),
        p_a=pa, p_b=pb, design_a=xa, design_b=xb, method=method,
        clamp_count=ca + cb, **kw,
    )


def fit_newton(
    sample: CombinedSample,
    subset=None,
    *,
    positivity: PositivityConfig = PositivityConfig(),
    tol: float = 1e-8,
    max_iter: int = 200,
) -> PropensityFit:
    """Unpenalised pseudo-likelihood fit on ``subset`` (None: all covariates)."""
    subset = tuple(range(sample.p)) if subset is None else tuple(sorted(int(j) for j in subset))
    xa = design_matrix(sample, subset, True, "a")
    xb = design_matrix(sample, subset, True, "b")
    beta, iters, conv = _newton(xa, xb, sample.d_b, tol=tol, max_iter=max_iter)
    return _make_fit(sample, beta, xa, xb, subset, subset, "newton", positivity.epsilon,
                     converged=conv, iterations=iters)


def working_response(sample: CombinedSample, fit: PropensityFit, *, mode: str = "exact",
                     positivity: PositivityConfig = PositivityConfig()) -> WorkingResponse:
    """IRLS working response and weights on B for one Newton step from ``fit``.

    ``mode="paper"`` builds ystar = x'beta + (delta - p) / (p (1 - p)) using
    the delta observed on B units. Its implied gradient is the B-only
    estimate sum_B d (delta - p) x. ``mode="exact"`` (default) shifts ystar
    by a vector in the column space of the design so that the weighted
    least-squares solution is the exact Newton step on the full pseudo
    log-likelihood; at a converged fit that solution is the fit itself.
    """
    xb = fit.design_b
    d = sample.d_b
    raw = expit(xb @ fit.beta)
    p, clamped = _clamp(raw, positivity.epsilon)
    v = p * (1 - p)
    w = d * v
    ystar = xb @ fit.beta + (sample.delta_b - p) / v
    if mode == "exact":
        u_true = pseudo_gradient(fit.beta, fit.design_a, xb, d)
        u_b = xb.T @ (d * (sample.delta_b - p))
        gram = xb.T @ (xb * w[:, None])
        shift = np.linalg.lstsq(gram, u_b - u_true, rcond=None)[0]
        ystar = ystar - xb @ shift
    elif mode != "paper":
        raise ValueError(f"unknown working-response mode {mode!r}")
    return WorkingResponse(ystar=ystar, w=w, clamp_count=clamped)


def outcome_coefficients(sample: CombinedSample, family: str = "linear") -> np.ndarray:
    """Outcome-regression slopes on all covariates, fitted on A (no intercept)."""
    if family == "linear" and sample.n_a <= sample.p + 1:
        raise InsufficientDataError(f"n_a={sample.n_a} too small for {sample.p} covariates")
    return fit_outcome(sample, family).coef[1:]


def adaptive_factors(alpha, gamma: float = 1.0, zero_tol: float = 1e-10) -> np.ndarray:
    """1/|alpha|^gamma; coefficients below ``zero_tol`` get an infinite factor."""
    a = np.abs(np.asarray(alpha, dtype=float))
    with np.errstate(divide="ignore"):
        return np.where(a < zero_tol, np.inf, 1.0 / a**gamma)


def assign_folds(n: int, v: int, labels=None, rng=None) -> np.ndarray:
    """Fold id per unit; units sharing a label always share a fold."""
    rng = np.random.default_rng() if rng is None else rng
    if labels is None:
        labels = np.arange(n)
    labels = np.asarray(labels)
    if labels.shape[0] != n:
        raise ValueError("one fold label per B unit required")
    groups, inverse = np.unique(labels, return_inverse=True)
    if groups.size < v:
        raise ValueError(f"{groups.size} groups cannot fill {v} folds")
    group_fold = np.empty(groups.size, dtype=int)
    group_fold[rng.permutation(groups.size)] = np.arange(groups.size) % v
    return group_fold[inverse]


def lambda_grid(prob: WlsProblem, n_lambda=50, ratio=1e-4, config=SolverConfig()) -> np.ndarray:
    lmax = lambda_max(prob, config)
    if lmax <= 0:
        return np.array([0.0])
    return np.geomspace(lmax, lmax * ratio, n_lambda)


def cv_wls(prob: WlsProblem, grid, folds, *, solver="lasso", config=SolverConfig()) -> CvResult:
    """V-fold CV of a penalised WLS problem.

    The score of a fold is the held-out weighted squared error
    ``sum w (y - x'b)^2``; the returned lambda minimises its fold average.
    """
    grid = np.asarray(grid, dtype=float)
    folds = np.asarray(folds)
    v_ids = np.unique(folds)
    losses = np.zeros((v_ids.size, grid.size))
    path_fn = lasso_path if solver == "lasso" else scad_path
    for i, v in enumerate(v_ids):
        tr, te = folds != v, folds == v
        path = path_fn(prob.subset_rows(tr), grid, config)
        resid = prob.y[te][:, None] - prob.xmat[te] @ path.T
        losses[i] = prob.w[te] @ resid**2
    mean = losses.mean(axis=0)
    return CvResult(float(grid[int(np.argmin(mean))]), grid, mean, losses, folds)


def _penalized_problem(sample, factors, full_fit, mode):
    wr = working_response(sample, full_fit, mode=mode)
    pf = np.r_[0.0, np.asarray(factors, dtype=float)]
    return WlsProblem(full_fit.design_b, wr.ystar, wr.w, pf), wr


def cv_lambda(sample: CombinedSample, factors, penalty: PenaltyConfig, rng=None, *,
              full_fit: PropensityFit | None = None, solver="lasso", mode="exact",
              config=SolverConfig()) -> CvResult:
    """Choose lambda by V-fold CV over B on the frozen working response."""
    full_fit = full_fit or fit_newton(sample)
    prob, _ = _penalized_problem(sample, factors, full_fit, mode)
    grid = penalty.lambda_grid
    if grid is None:
        grid = lambda_grid(prob, penalty.n_lambda, penalty.lambda_ratio, config)
    folds = assign_folds(sample.n_b, penalty.v_folds, penalty.fold_labels, rng)
    return cv_wls(prob, grid, folds, solver=solver, config=config)


def _fit_penalized(sample, factors, penalty, method, rng, *, lam, refit, mode, config,
                   positivity, full_fit=None):
    full_fit = full_fit or fit_newton(sample, positivity=positivity)
    prob, wr = _penalized_problem(sample, factors, full_fit, mode)
    cv = None
    if lam is None:
        cv = cv_lambda(sample, factors, penalty, rng, full_fit=full_fit, mode=mode, config=config)
        lam = cv.lambda_
    if lam > 0 and cv is not None and cv.grid.size > 1:
        # warm start down the grid; a cold start at small lambda is slow
        path = lasso_path(prob, cv.grid[cv.grid >= lam], config)
        beta = lasso_cd(prob.with_lambda(lam), config, warm_start=path[-1])
    else:
        beta = lasso_cd(prob.with_lambda(lam), config)
    active = tuple(j for j in range(sample.p) if beta[1 + j] != 0)
    info = {"working_response": mode, "clamp_count_working": wr.clamp_count}
    if refit:
        fit = fit_newton(sample, active, positivity=positivity)
        fit.method, fit.lambda_, fit.cv, fit.penalty_factors = method, lam, cv, np.asarray(factors)
        fit.info.update(info, refit=True)
        return fit
    cols = list(active)
    xa = design_matrix(sample, cols, True, "a")
    xb = design_matrix(sample, cols, True, "b")
    return _make_fit(
        sample, np.r_[beta[0], beta[1 + np.asarray(cols, dtype=int)]], xa, xb, cols, active,
        method, positivity.epsilon, converged=True, iterations=full_fit.iterations, lambda_=lam,
        penalty_factors=np.asarray(factors), cv=cv, info=info,
    )


def fit_lasso(sample: CombinedSample, penalty: PenaltyConfig = PenaltyConfig(), rng=None, *,
              lam=None, refit=False, mode="exact", config=SolverConfig(),
              positivity=PositivityConfig(), full_fit=None) -> PropensityFit:
    """LASSO on the propensity working response, all penalty factors 1."""
    return _fit_penalized(sample, np.ones(sample.p), penalty, "lasso", rng, lam=lam, refit=refit,
                          mode=mode, config=config, positivity=positivity, full_fit=full_fit)


def fit_oalasso(sample: CombinedSample, penalty: PenaltyConfig = PenaltyConfig(), rng=None, *,
                family="linear", lam=None, refit=False, mode="exact", config=SolverConfig(),
                positivity=PositivityConfig(), full_fit=None) -> PropensityFit:
    """Outcome-adaptive LASSO for the propensity score.

    Penalty factors are 1/|alpha_j|^gamma with alpha the outcome-regression
    slopes fitted on A, so covariates unrelated to the outcome are pushed
    out of the selection model.
    """
    alpha = outcome_coefficients(sample, family)
    factors = adaptive_factors(alpha, penalty.gamma)
    fit = _fit_penalized(sample, factors, penalty, "oalasso", rng, lam=lam, refit=refit,
                         mode=mode, config=config, positivity=positivity, full_fit=full_fit)
    fit.info["outcome_coefficients"] = alpha.tolist()
    return fit


def _outcome_problem(sample, family):
    xa = design_matrix(sample, None, True, "a")
    ya = sample.y_a
    pf = np.r_[0.0, np.ones(sample.p)]
    if family == "linear":
        return WlsProblem(xa, ya, np.ones(len(ya)), pf)
    beta, _ = logistic_irls(xa, ya)
    p = np.clip(expit(xa @ beta), 1e-6, 1 - 1e-6)
    v = p * (1 - p)
    return WlsProblem(xa, xa @ beta + (ya - p) / v, v, pf)


def _scad_select(prob, penalty, folds, config):
    grid = penalty.lambda_grid
    if grid is None:
        grid = lambda_grid(prob, penalty.n_lambda, penalty.lambda_ratio, config)
    cv = cv_wls(prob, grid, folds, solver="scad", config=config)
    beta = scad_lla(prob.with_lambda(cv.lambda_), config)
    return tuple(j for j in range(beta.size - 1) if beta[1 + j] != 0), cv


def fit_scad_union(sample: CombinedSample, penalty: PenaltyConfig = PenaltyConfig(), family="linear",
                   rng=None, *, mode="exact", config=SolverConfig(),
                   positivity=PositivityConfig(), full_fit=None):
    """Two-step SCAD selection: union of propensity and outcome selections.

    Returns ``(fit, union)``; ``fit`` is the unpenalised pseudo-likelihood
    refit on the union, which the caller also uses for the outcome refit.
    """
    rng = np.random.default_rng() if rng is None else rng
    full_fit = full_fit or fit_newton(sample, positivity=positivity)
    prob_p, _ = _penalized_problem(sample, np.ones(sample.p), full_fit, mode)
    folds_b = assign_folds(sample.n_b, penalty.v_folds, penalty.fold_labels, rng)
    c_p, cv_p = _scad_select(prob_p, penalty, folds_b, config)
    prob_m = _outcome_problem(sample, family)
    folds_a = assign_folds(sample.n_a, penalty.v_folds, None, rng)
    c_m, cv_m = _scad_select(prob_m, PenaltyConfig(v_folds=penalty.v_folds, n_lambda=penalty.n_lambda,
                                                   lambda_ratio=penalty.lambda_ratio), folds_a, config)
    union = tuple(sorted(set(c_p) | set(c_m)))
    fit = fit_newton(sample, union, positivity=positivity)
    fit.method = "scad_union"
    fit.lambda_ = cv_p.lambda_
    fit.info.update({
        "propensity_set": list(c_p),
        "outcome_set": list(c_m),
        "outcome_lambda": cv_m.lambda_,
    })
    return fit, union


def fit_collaborative(sample: CombinedSample, mhat, *, positivity=PositivityConfig(),
                      tol=1e-8) -> PropensityFit:
    """Propensity modelled on the fitted outcome regression alone.

    ``mhat`` holds one fitted value per stored record (A and B).
    """
    mhat = np.asarray(mhat, dtype=float).reshape(sample.n)
    ma, mb = mhat[sample.mask_a], mhat[sample.mask_b]
    used = np.r_[ma, mb]
    if np.ptp(used) <= 1e-12 * max(1.0, np.max(np.abs(used))):
        raise DegenerateModelError("fitted outcome is constant; collaborative score undefined")
    if np.ptp(mb) <= 1e-12 * max(1.0, np.max(np.abs(mb))):
        raise DegenerateModelError("fitted outcome is constant on B")
    xa = np.column_stack([np.ones(ma.size), ma])
    xb = np.column_stack([np.ones(mb.size), mb])
    beta, iters, conv = _newton(xa, xb, sample.d_b, tol=tol)
    fit = _make_fit(sample, beta, xa, xb, (), (), "collaborative", positivity.epsilon,
                    converged=conv, iterations=iters)
    fit.info["design"] = ["intercept", "mhat"]
    return fit
