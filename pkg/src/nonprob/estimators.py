"""IPW and AIPW estimators of the population mean with plug-in variances."""

from __future__ import annotations

import json
import math
import warnings
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np

from .propensity import PropensityFit
from .sample import CombinedSample

__all__ = [
    "EstimateReport",
    "VarianceComponents",
    "design_variance",
    "wald_ci",
    "ipw_mean",
    "ipw_variance",
    "aipw_mean",
    "aipw_variance",
    "estimate_ipw",
    "estimate_aipw",
]

Z95 = 1.96


@dataclass
class VarianceComponents:
    b: list[float]
    first_term: float
    design_term: float
    d_hat: list[list[float]] | None = None
    h_n: float | None = None
    t_vals: list[float] | None = None
    n_hat_a: float | None = None
    n_hat_b: float | None = None


@dataclass
class EstimateReport:
    estimator: str
    mu_hat: float
    se: float | None = None
    ci: tuple[float, float] | None = None
    metadata: dict = field(default_factory=dict)
    components: VarianceComponents | None = None

    def __post_init__(self):
        if self.se is not None and self.ci is None:
            self.ci = wald_ci(self.mu_hat, self.se)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ci"] = list(self.ci) if self.ci is not None else None
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), default=_jsonable, **kw)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o)!r}")


def wald_ci(mu_hat: float, se: float) -> tuple[float, float]:
    if se < 0:
        raise ValueError("standard error must be non-negative")
    return (mu_hat - Z95 * se, mu_hat + Z95 * se)


def design_variance(values, d, pi, design: str | Callable = "poisson"):
    """Plug-in design variance of the weighted total sum_B d_i a_i.

    Poisson sampling: sum (1 - pi) d^2 a a'. ``values`` may be a vector
    (scalar total) or an n x k matrix (vector total, k x k result). Other
    designs are supported by passing a callable ``rule(values, d, pi)``.
    """
    if callable(design):
        return design(values, d, pi)
    if design != "poisson":
        raise ValueError(
            f"no built-in variance rule for design {design!r}; pass a callable rule(values, d, pi)"
        )
    a = np.asarray(values, dtype=float)
    c = (1.0 - np.asarray(pi, dtype=float)) * np.asarray(d, dtype=float) ** 2
    if a.ndim == 1:
        return float(np.sum(c * a**2))
    return (a * c[:, None]).T @ a


def _check(sample: CombinedSample):
    if sample.n_a == 0:
        raise ValueError("sample A is empty")
    if sample.n_b == 0:
        raise ValueError("sample B is empty")


def ipw_mean(sample: CombinedSample, pfit: PropensityFit) -> float:
    """Hajek-type IPW mean: sum_A y/p over sum_A 1/p."""
    if sample.n_a == 0:
        raise ValueError("sample A is empty")
    inv = 1.0 / pfit.p_a
    return float(np.sum(inv * sample.y_a) / np.sum(inv))


def _b_inverse_gram(pfit, d):
    xb, pb = pfit.design_b, pfit.p_b
    gram = xb.T @ (xb * (d * pb * (1 - pb))[:, None])
    try:
        return np.linalg.inv(gram)
    except np.linalg.LinAlgError:
        warnings.warn("singular B information matrix; adding a small ridge", RuntimeWarning, stacklevel=3)
        q = gram.shape[0]
        return np.linalg.inv(gram + 1e-8 * np.trace(gram) / q * np.eye(q))


def ipw_variance(sample: CombinedSample, pfit: PropensityFit, mu_hat: float,
                 design="poisson", *, return_components=False):
    """Plug-in standard error of the IPW mean."""
    _check(sample)
    pa, xa = pfit.p_a, pfit.design_a
    y = sample.y_a
    d, pi = sample.d_b, sample.pi_b
    n_a = np.sum(1.0 / pa)
    n_b = np.sum(d)
    b2 = (((1.0 / pa - 1.0) * (y - mu_hat)) @ xa) @ _b_inverse_gram(pfit, d)
    resid = (y - mu_hat) / pa - xa @ b2
    first = float(np.sum((1 - pa) * resid**2) / n_a**2)
    d_hat = design_variance(pfit.design_b * pfit.p_b[:, None], d, pi, design) / n_b**2
    second = float(b2 @ d_hat @ b2)
    var = max(first + second, 0.0)
    se = math.sqrt(var)
    if not return_components:
        return se
    comps = VarianceComponents(b=b2.tolist(), first_term=first, design_term=second,
                               d_hat=np.atleast_2d(d_hat).tolist(), n_hat_a=float(n_a), n_hat_b=float(n_b))
    return se, comps


def _split_mhat(sample, mhat):
    mhat = np.asarray(mhat, dtype=float)
    if mhat.shape == (sample.n,):
        return mhat[sample.mask_a], mhat[sample.mask_b]
    raise ValueError("mhat must hold one value per stored record")


def aipw_mean(sample: CombinedSample, pfit: PropensityFit, mhat) -> float:
    """Doubly robust mean: weighted A residuals plus the B design-weighted mean of mhat."""
    _check(sample)
    ma, mb = _split_mhat(sample, mhat)
    inv = 1.0 / pfit.p_a
    d = sample.d_b
    return float(np.sum(inv * (sample.y_a - ma)) / np.sum(inv) + np.sum(d * mb) / np.sum(d))


def aipw_variance(sample: CombinedSample, pfit: PropensityFit, mhat, mu_hat: float | None = None,
                  design="poisson", *, return_components=False):
    """Plug-in standard error of the AIPW mean.

    ``mu_hat`` is accepted for interface symmetry; the formula itself only
    needs the residual mean ``h_n``.
    """
    _check(sample)
    ma, mb = _split_mhat(sample, mhat)
    pa, xa = pfit.p_a, pfit.design_a
    pb, xb = pfit.p_b, pfit.design_b
    d, pi = sample.d_b, sample.pi_b
    y = sample.y_a
    n_a = np.sum(1.0 / pa)
    n_b = np.sum(d)
    h_n = float(np.sum((y - ma) / pa) / n_a)
    e = y - ma - h_n
    b3 = (((1.0 / pa - 1.0) * e) @ xa) @ _b_inverse_gram(pfit, d)
    first = float(np.sum((1 - pa) * (e / pa - xa @ b3) ** 2) / n_a**2)
    t = pb * (xb @ b3) + mb - np.sum(d * mb) / n_b
    w_hat = design_variance(t, d, pi, design) / n_b**2
    var = max(first + w_hat, 0.0)
    se = math.sqrt(var)
    if not return_components:
        return se
    comps = VarianceComponents(b=b3.tolist(), first_term=first, design_term=float(w_hat), h_n=h_n,
                               t_vals=t.tolist(), n_hat_a=float(n_a), n_hat_b=float(n_b))
    return se, comps


def estimate_ipw(sample, pfit, name="ipw", design="poisson", metadata=None) -> EstimateReport:
    mu = ipw_mean(sample, pfit)
    se, comps = ipw_variance(sample, pfit, mu, design, return_components=True)
    meta = {"propensity": pfit.metadata()}
    meta.update(metadata or {})
    return EstimateReport(name, mu, se, metadata=meta, components=comps)


def estimate_aipw(sample, pfit, mhat, name="aipw", design="poisson", metadata=None) -> EstimateReport:
    mu = aipw_mean(sample, pfit, mhat)
    se, comps = aipw_variance(sample, pfit, mhat, mu, design, return_components=True)
    meta = {"propensity": pfit.metadata()}
    meta.update(metadata or {})
    return EstimateReport(name, mu, se, metadata=meta, components=comps)
