import math

import numpy as np
import pytest

from nonprob import CombinedSample, InsufficientDataError
from nonprob.outcome import BasisSpec, build_basis, fit_outcome, fit_outcome_flexible, predict
from nonprob.simulation import ScenarioSpec, generate_population, replicate_rng


def a_only(x, y):
    """Sample where every unit is in A, plus one B unit so it validates."""
    x = np.asarray(x, dtype=float)
    n = len(y)
    return CombinedSample(
        x=np.vstack([x, x[:1]]),
        delta=[1] * n + [0],
        in_b=[0] * n + [1],
        y=list(y) + [math.nan],
        d=[math.nan] * n + [1.0],
    )


def test_exact_line_is_recovered():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 2))
    y = 1.5 + 2.0 * x[:, 0] - 0.5 * x[:, 1]
    fit = fit_outcome(a_only(x, y))
    np.testing.assert_allclose(fit.coef, [1.5, 2.0, -0.5], atol=1e-10)
    assert np.max(np.abs(predict(fit, x) - y)) < 1e-10


def test_constant_outcome_gives_zero_slope():
    x = np.arange(10.0)[:, None]
    fit = fit_outcome(a_only(x, np.full(10, 4.0)))
    assert fit.coef[1] == pytest.approx(0.0, abs=1e-12)
    assert fit.coef[0] == pytest.approx(4.0)


def test_ols_residuals_orthogonal_and_mean_preserved():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 3))
    y = x @ [1.0, -1.0, 0.5] + rng.normal(size=200) ** 2
    s = a_only(x, y)
    fit = fit_outcome(s)
    design = np.column_stack([np.ones(200), x])
    r = y - predict(fit, x)
    assert np.max(np.abs(design.T @ r)) < 1e-8 * 200
    assert predict(fit, x.mean(axis=0))[0] == pytest.approx(y.mean())


def test_subset_fit_uses_listed_columns_only():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(50, 3))
    y = 1.0 + x[:, 2]
    fit = fit_outcome(a_only(x, y), subset=(2,))
    assert fit.subset == (2,) and fit.coef.size == 2
    np.testing.assert_allclose(predict(fit, x), y, atol=1e-10)


def test_too_few_a_units():
    x = np.array([[0.0, 1.0], [1.0, 2.0]])
    with pytest.raises(InsufficientDataError):
        fit_outcome(a_only(x, [1.0, 2.0]))


def test_dimension_mismatch_on_predict():
    x = np.random.default_rng(9).normal(size=(10, 2))
    fit = fit_outcome(a_only(x, np.arange(10.0)))
    with pytest.raises(ValueError, match="expected 2 covariates"):
        predict(fit, np.zeros((3, 3)))


def test_logistic_outcome():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(400, 1))
    y = (rng.random(400) < 1 / (1 + np.exp(-(0.5 + x[:, 0])))).astype(float)
    fit = fit_outcome(a_only(x, y), family="logistic")
    p = predict(fit, x)
    assert np.all((p > 0) & (p < 1))
    # score equations: observed and fitted totals agree
    assert np.sum(p) == pytest.approx(np.sum(y), abs=1e-6)
    assert fit.coef[1] == pytest.approx(1.0, abs=0.35)


def test_logistic_rejects_non_binary():
    x = np.arange(10.0)[:, None]
    with pytest.raises(ValueError, match="0/1"):
        fit_outcome(a_only(x, np.arange(10.0)), family="logistic")


def test_unknown_family():
    x = np.arange(10.0)[:, None]
    with pytest.raises(ValueError):
        fit_outcome(a_only(x, np.arange(10.0)), family="poisson")


# flexible basis


def test_basis_drops_zero_variance_covariate():
    rng = np.random.default_rng(4)
    x = np.column_stack([rng.normal(size=50), np.full(50, 3.0), rng.normal(size=50)])
    spec = build_basis(x, (0, 1, 2))
    assert all(1 not in t[1:2] and not (t[0] == "prod" and 1 in t[1:3]) for t in spec.terms)
    assert ("main", 0) in spec.terms and ("prod", 0, 2) in spec.terms


def test_basis_drops_duplicate_columns():
    x = np.column_stack([np.tile([0.0, 1.0], 20), np.arange(40.0)])
    spec = build_basis(x, (0, 1))
    # a binary column equals its own square after centering up to an affine map
    assert ("sq", 0) not in spec.terms
    z = spec.expand(x)
    assert np.linalg.matrix_rank(np.column_stack([np.ones(40), z])) == z.shape[1] + 1


def test_basis_is_reproducible():
    x = np.random.default_rng(5).normal(size=(60, 3))
    assert build_basis(x, (0, 1, 2)) == build_basis(x.copy(), (0, 1, 2))


def test_basis_unknown_term():
    with pytest.raises(ValueError):
        BasisSpec((("cube", 0),)).expand(np.zeros((2, 1)))


def test_flexible_matches_ols_on_linear_data():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(600, 3))
    y = 1.0 + x @ [1.0, 0.5, -0.5] + rng.normal(size=600)
    train = a_only(x[:400], y[:400])
    ols = fit_outcome(train)
    flex = fit_outcome_flexible(train, rng=np.random.default_rng(0))
    mse_ols = np.mean((y[400:] - predict(ols, x[400:])) ** 2)
    mse_flex = np.mean((y[400:] - predict(flex, x[400:])) ** 2)
    assert mse_flex <= 1.10 * mse_ols


def test_flexible_beats_ols_on_transformed_covariates():
    spec = ScenarioSpec.from_id(4, N=3000)
    pop = generate_population(spec, replicate_rng(9, 0))
    train = a_only(pop.x[:1500], pop.y[:1500])
    ols = fit_outcome(train)
    flex = fit_outcome_flexible(train, rng=np.random.default_rng(0))
    truth = pop.mean_outcome[1500:]

    def r2(fit):
        pred = predict(fit, pop.x[1500:])
        return 1 - np.mean((truth - pred) ** 2) / np.var(truth)

    assert r2(flex) > r2(ols)


def test_flexible_is_deterministic_for_a_seed():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(150, 2))
    y = np.sin(x[:, 0]) + x[:, 1] ** 2 + rng.normal(size=150) * 0.1
    s = a_only(x, y)
    a = fit_outcome_flexible(s, rng=np.random.default_rng(3))
    b = fit_outcome_flexible(s, rng=np.random.default_rng(3))
    np.testing.assert_array_equal(a.coef, b.coef)
    assert a.diagnostics["lambda"] == b.diagnostics["lambda"]


def test_flexible_explicit_zero_lambda_is_least_squares():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(80, 2))
    y = x[:, 0] * x[:, 1] + rng.normal(size=80)
    s = a_only(x, y)
    fit = fit_outcome_flexible(s, lambda_grid=[0.0])
    design = fit.design(x)
    r = y - design @ fit.coef
    assert np.max(np.abs(design.T @ r)) < 1e-8 * 80
