import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nonprob.errors import ConvergenceError, SingularMatrixError
from nonprob.solvers import (
    SolverConfig,
    Standardizer,
    WlsProblem,
    lambda_max,
    lasso_cd,
    lasso_path,
    scad_derivative,
    scad_lla,
    scad_path,
    soft_threshold,
    wls_solve,
)


def random_problem(rng, n=30, k=4, pf=None):
    x = np.column_stack([np.ones(n), rng.normal(size=(n, k)) * rng.uniform(0.5, 3, k)])
    y = x @ rng.normal(size=k + 1) + rng.normal(size=n)
    w = rng.uniform(0.3, 2.0, n)
    return WlsProblem(x, y, w, pf)


def normal_equations(prob):
    xw = prob.xmat * prob.w[:, None]
    return np.linalg.solve(prob.xmat.T @ xw, xw.T @ prob.y)


# weighted least squares


def test_wls_mean():
    assert wls_solve(WlsProblem([[1.0], [1.0]], [2.0, 4.0], [1.0, 1.0])) == pytest.approx([3.0])


def test_wls_weighted_mean():
    assert wls_solve(WlsProblem([[1.0], [1.0]], [2.0, 4.0], [3.0, 1.0])) == pytest.approx([2.5])


def test_wls_matches_normal_equations():
    prob = random_problem(np.random.default_rng(0), n=20, k=3)
    np.testing.assert_allclose(wls_solve(prob), normal_equations(prob), atol=1e-8)
    beta = wls_solve(prob)
    grad = prob.xmat.T @ (prob.w * (prob.y - prob.xmat @ beta))
    assert np.max(np.abs(grad)) < 1e-7


def test_wls_singular_ridge_or_error():
    x = np.column_stack([np.ones(6), np.arange(6.0), 2 * np.arange(6.0)])
    prob = WlsProblem(x, np.arange(6.0), np.ones(6), np.zeros(3))
    with pytest.warns(RuntimeWarning, match="ridge"):
        beta = wls_solve(prob)
    assert np.all(np.isfinite(beta))
    with pytest.raises(SingularMatrixError):
        wls_solve(prob, SolverConfig(ridge_fallback=False))


@pytest.mark.parametrize("kwargs", [
    {"w": [1.0, 0.0]},
    {"w": [1.0, -1.0]},
    {"penalty_factors": [-1.0]},
    {"lambda_": -0.1},
])
def test_problem_validation(kwargs):
    base = {"xmat": [[1.0], [1.0]], "y": [1.0, 2.0], "w": [1.0, 1.0]}
    base.update(kwargs)
    with pytest.raises(ValueError):
        WlsProblem(**base)


@pytest.mark.parametrize("kwargs", [{"tol": 0.0}, {"scad_a": 2.0}, {"max_iter": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SolverConfig(**kwargs)


def test_default_penalty_skips_intercept():
    prob = WlsProblem(np.column_stack([np.ones(3), [1.0, 2, 3]]), [1.0, 2, 3], np.ones(3))
    np.testing.assert_array_equal(prob.penalty_factors, [0.0, 1.0])


# soft threshold


@pytest.mark.parametrize("z, t, expected", [(3, 1, 2), (-0.5, 1, 0), (-3, 1, -2), (0.5, 0, 0.5)])
def test_soft_threshold(z, t, expected):
    assert soft_threshold(z, t) == expected


def test_soft_threshold_negative_threshold():
    with pytest.raises(ValueError):
        soft_threshold(1.0, -1.0)


# standardisation


def test_standardizer_round_trip():
    rng = np.random.default_rng(4)
    x = np.column_stack([np.ones(10), rng.normal(size=(10, 2)) * 5 + 3])
    std = Standardizer(x, rng.uniform(1, 2, 10))
    beta = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(std.to_original(std.to_standard(beta)), beta)
    np.testing.assert_allclose(std.transform(x) @ std.to_standard(beta), x @ beta)


# LASSO


def test_lasso_lambda_zero_is_wls():
    prob = random_problem(np.random.default_rng(1))
    np.testing.assert_allclose(lasso_cd(prob.with_lambda(0.0)), wls_solve(prob), atol=1e-8)


def test_lasso_large_lambda_is_weighted_mean():
    prob = random_problem(np.random.default_rng(2)).with_lambda(1e9)
    beta = lasso_cd(prob)
    assert np.all(beta[1:] == 0)
    assert beta[0] == pytest.approx(np.average(prob.y, weights=prob.w))


def test_lasso_at_lambda_max_is_intercept_only():
    prob = random_problem(np.random.default_rng(3))
    lmax = lambda_max(prob)
    assert np.all(lasso_cd(prob.with_lambda(lmax * (1 + 1e-9)))[1:] == 0)
    assert np.any(lasso_cd(prob.with_lambda(lmax * 0.99))[1:] != 0)


def test_lasso_single_covariate_soft_threshold_oracle():
    rng = np.random.default_rng(5)
    n = 25
    w = rng.uniform(0.5, 2.0, n)
    z = rng.normal(size=n)
    z = z - np.average(z, weights=w)
    z = z / np.sqrt(np.average(z**2, weights=w))  # already standardised
    y = 1.5 + 0.8 * z + rng.normal(size=n)
    prob = WlsProblem(np.column_stack([np.ones(n), z]), y, w)
    yc = y - np.average(y, weights=w)
    for lam in (0.5, 3.0, 10.0, 40.0):
        beta = lasso_cd(prob.with_lambda(lam))
        # sum w z^2 = sum w, so the minimiser is S(sum w z y, lam/2) / sum w
        expected = soft_threshold(float(np.sum(w * z * yc)), lam / 2) / w.sum()
        assert beta[1] == pytest.approx(expected, abs=1e-10)
        assert beta[0] == pytest.approx(np.average(y, weights=w) - expected * np.average(z, weights=w))


def test_lasso_path_scalar_monotone():
    prob = random_problem(np.random.default_rng(6), k=1)
    grid = np.geomspace(lambda_max(prob), lambda_max(prob) * 1e-3, 30)
    path = lasso_path(prob, grid)
    mags = np.abs(path[:, 1])
    assert np.all(np.diff(mags) >= -1e-12)


def test_lasso_path_matches_cold_starts():
    prob = random_problem(np.random.default_rng(7), k=5)
    grid = np.geomspace(lambda_max(prob), lambda_max(prob) * 1e-2, 8)
    path = lasso_path(prob, grid)
    for lam, row in zip(grid, path):
        np.testing.assert_allclose(row, lasso_cd(prob.with_lambda(lam)), atol=1e-6)


def test_lasso_objective_non_increasing():
    prob = random_problem(np.random.default_rng(8), n=60, k=8)
    prob = prob.with_lambda(0.05 * lambda_max(prob))
    _, hist = lasso_cd(prob, SolverConfig(tol=1e-12), return_history=True)
    assert hist.size > 2
    assert np.all(np.diff(hist) <= 1e-12 * np.abs(hist[:-1]))


def test_unpenalised_problem_equals_wls_for_any_lambda():
    rng = np.random.default_rng(9)
    prob = random_problem(rng, pf=np.zeros(5))
    for lam in (0.0, 1.0, 1e6):
        np.testing.assert_allclose(lasso_cd(prob.with_lambda(lam)), wls_solve(prob), atol=1e-8)


def test_infinite_factor_pins_coefficient():
    rng = np.random.default_rng(10)
    prob = random_problem(rng, pf=np.array([0.0, 1.0, np.inf, 1.0, 1.0]))
    for lam in (0.0, 0.1 * lambda_max(prob)):
        beta = lasso_cd(prob.with_lambda(lam))
        assert beta[2] == 0.0
        assert np.any(beta[[1, 3, 4]] != 0)


def test_non_convergence_carries_last_iterate():
    prob = random_problem(np.random.default_rng(11), n=50, k=6)
    prob = prob.with_lambda(0.01 * lambda_max(prob))
    with pytest.raises(ConvergenceError) as err:
        lasso_cd(prob, SolverConfig(tol=1e-15, max_iter=1))
    assert err.value.last is not None and err.value.last.shape == (7,)


@given(st.integers(0, 10_000), st.floats(0.01, 0.95))
@settings(max_examples=40, deadline=None)
def test_lasso_kkt(seed, frac):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, n=int(rng.integers(10, 40)), k=int(rng.integers(1, 6)))
    lam = frac * lambda_max(prob)
    beta = lasso_cd(prob.with_lambda(lam))
    x, w = prob.xmat, prob.w
    scale = np.r_[0.0, np.sqrt(np.average((x[:, 1:] - np.average(x[:, 1:], axis=0, weights=w)) ** 2,
                                          axis=0, weights=w))]
    g = 2 * x.T @ (w * (prob.y - x @ beta))
    tol = 1e-6 * 2 * w.sum() * np.std(prob.y)
    for j in range(1, x.shape[1]):
        if beta[j] != 0:
            assert abs(g[j] - lam * scale[j] * np.sign(beta[j])) < tol
        else:
            assert abs(g[j]) <= lam * scale[j] + tol
    assert abs(g[0]) < tol


# SCAD


def test_scad_derivative_regions():
    lam, a = 1.0, 3.7
    np.testing.assert_allclose(scad_derivative([0.0, 0.5, 1.0], lam, a), [1.0, 1.0, 1.0])
    assert scad_derivative([2.0], lam, a)[0] == pytest.approx((3.7 - 2.0) / 2.7)
    np.testing.assert_array_equal(scad_derivative([3.7, 5.0, -9.0], lam, a), [0.0, 0.0, 0.0])


def test_scad_lambda_zero_is_wls():
    prob = random_problem(np.random.default_rng(12))
    np.testing.assert_allclose(scad_lla(prob.with_lambda(0.0)), wls_solve(prob), atol=1e-8)


def test_scad_large_coefficients_unbiased():
    # strong signals sit in the flat region after the first round, so the
    # final fit on the support equals plain least squares on that support
    rng = np.random.default_rng(13)
    n = 200
    x = np.column_stack([np.ones(n), rng.normal(size=(n, 5))])
    y = x @ np.array([1.0, 3.0, -2.5, 0.0, 0.0, 0.0]) + 0.3 * rng.normal(size=n)
    prob = WlsProblem(x, y, np.ones(n))
    lam = 0.2 * lambda_max(prob)
    beta = scad_lla(prob.with_lambda(lam))
    support = np.flatnonzero(beta)
    np.testing.assert_array_equal(support, [0, 1, 2])
    ols = wls_solve(WlsProblem(x[:, support], y, np.ones(n), np.zeros(3)))
    np.testing.assert_allclose(beta[support], ols, atol=1e-6)
    lasso = lasso_cd(prob.with_lambda(lam))
    assert np.all(np.abs(lasso[1:3]) < np.abs(beta[1:3]))


def _best_subset(x, y, max_size=6):
    n = x.shape[0]
    best, best_bic = (), np.inf
    for size in range(max_size + 1):
        for cols in itertools.combinations(range(1, x.shape[1]), size):
            xs = x[:, (0,) + cols]
            rss = np.sum((y - xs @ np.linalg.lstsq(xs, y, rcond=None)[0]) ** 2)
            bic = n * np.log(rss / n) + np.log(n) * (size + 1)
            if bic < best_bic:
                best, best_bic = cols, bic
    return set(best)


def test_scad_against_best_subset_oracle():
    false_scad = false_lasso = 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        n = 120
        x = np.column_stack([np.ones(n), rng.normal(size=(n, 6))])
        y = x @ np.array([0.5, 1.0, -1.0, 0, 0, 0, 0]) + rng.normal(size=n)
        best = _best_subset(x, y)
        assert {1, 2} <= best
        prob = WlsProblem(x, y, np.ones(n))
        lam = 0.15 * lambda_max(prob)
        b_scad = scad_lla(prob.with_lambda(lam))
        b_lasso = lasso_cd(prob.with_lambda(lam))
        scad = set(np.flatnonzero(b_scad[1:]) + 1)
        assert best <= scad, seed
        false_scad += len(scad - best)
        false_lasso += len(set(np.flatnonzero(b_lasso[1:]) + 1) - best)
        # on the oracle support SCAD is closer to least squares than LASSO
        cols = [0] + sorted(best)
        ols = np.linalg.lstsq(x[:, cols], y, rcond=None)[0]
        assert np.abs(b_scad[cols] - ols).max() < np.abs(b_lasso[cols] - ols).max(), seed
    assert false_scad <= false_lasso


def test_scad_path_matches_pointwise():
    prob = random_problem(np.random.default_rng(14), k=5)
    grid = np.geomspace(lambda_max(prob), 1e-2 * lambda_max(prob), 5)
    path = scad_path(prob, grid)
    for lam, row in zip(grid, path):
        np.testing.assert_allclose(row, scad_lla(prob.with_lambda(lam)), atol=1e-6)
