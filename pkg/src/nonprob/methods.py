"""Named estimator configurations (``ipw-lasso``, ``aipw-benkeser``, ...).

Each name combines an estimator (IPW or AIPW) with a propensity method and,
for AIPW, an outcome model. Propensity and outcome fits are shared between
names evaluated on the same sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimators import EstimateReport, estimate_aipw, estimate_ipw
from .outcome import fit_outcome, fit_outcome_flexible, predict
from .propensity import (
    PenaltyConfig,
    PropensityFit,
    fit_collaborative,
    fit_lasso,
    fit_newton,
    fit_oalasso,
    fit_scad_union,
)
from .sample import CombinedSample

__all__ = ["METHODS", "MethodOptions", "parse_methods", "run_methods", "selection_of"]

# name -> (estimator, propensity method, outcome model)
METHODS = {
    "ipw-logistic": ("ipw", "logistic", None),
    "ipw-lasso": ("ipw", "lasso", None),
    "ipw-oalasso": ("ipw", "oalasso", None),
    "aipw-logistic": ("aipw", "logistic", "default"),
    "aipw-lasso": ("aipw", "lasso", "default"),
    "aipw-oalasso": ("aipw", "oalasso", "default"),
    "aipw-benkeser": ("aipw", "collaborative", "benkeser"),
    "aipw-scad-union": ("aipw", "scad_union", "union"),
    "aipw-logistic-flex": ("aipw", "logistic", "flexible"),
}


@dataclass
class MethodOptions:
    """Knobs shared by all named methods.

    ``outcome_subset`` restricts the default outcome regression (None: all
    covariates). ``benkeser_outcome`` picks the outcome model that feeds the
    collaborative score: ``"default"`` or ``"flexible"``. ``mhat_zero``
    replaces every AIPW outcome model by the constant 0.
    """

    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    outcome_family: str = "linear"
    outcome_subset: tuple[int, ...] | None = None
    benkeser_outcome: str = "default"
    mode: str = "exact"
    refit: bool = False
    mhat_zero: bool = False


def parse_methods(text: str) -> list[str]:
    names = [m.strip().lower() for m in text.split(",") if m.strip()]
    unknown = [m for m in names if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; choose from {sorted(METHODS)}")
    return names


class _Cache:
    def __init__(self, sample, opts, rng):
        self.sample, self.opts, self.rng = sample, opts, rng
        self._store = {}

    def get(self, key, make):
        if key not in self._store:
            self._store[key] = make()
        return self._store[key]

    def full(self) -> PropensityFit:
        return self.get(("ps", "logistic"), lambda: fit_newton(self.sample))

    def outcome(self, kind, subset=None):
        s, o = self.sample, self.opts
        if kind == "flexible":
            fit = self.get(("om", "flexible"), lambda: fit_outcome_flexible(s, o.penalty, self.rng))
        else:
            subset = o.outcome_subset if subset is None else subset
            key = ("om", kind, None if subset is None else tuple(subset))
            fit = self.get(key, lambda: fit_outcome(s, o.outcome_family, subset))
        return fit

    def mhat(self, kind, subset=None):
        if self.opts.mhat_zero:
            return np.zeros(self.sample.n)
        return predict(self.outcome(kind, subset), self.sample.x)

    def propensity(self, method):
        s, o = self.sample, self.opts
        if method == "logistic":
            return self.full()
        if method == "lasso":
            return self.get(("ps", method), lambda: fit_lasso(
                s, o.penalty, self.rng, refit=o.refit, mode=o.mode, full_fit=self.full()))
        if method == "oalasso":
            return self.get(("ps", method), lambda: fit_oalasso(
                s, o.penalty, self.rng, family=o.outcome_family, refit=o.refit, mode=o.mode,
                full_fit=self.full()))
        if method == "scad_union":
            return self.get(("ps", method), lambda: fit_scad_union(
                s, o.penalty, o.outcome_family, self.rng, mode=o.mode, full_fit=self.full()))[0]
        if method == "collaborative":
            kind = "flexible" if o.benkeser_outcome == "flexible" else "linear"
            return self.get(("ps", method, kind), lambda: fit_collaborative(s, self.mhat(kind)))
        raise ValueError(method)


def run_methods(sample: CombinedSample, names, options: MethodOptions | None = None, rng=None):
    """Evaluate each named method; failures are returned as exception objects."""
    options = options or MethodOptions()
    rng = np.random.default_rng() if rng is None else rng
    cache = _Cache(sample, options, rng)
    out: dict[str, EstimateReport | Exception] = {}
    for name in names:
        est, ps, om = METHODS[name]
        try:
            pfit = cache.propensity(ps)
            if est == "ipw":
                rep = estimate_ipw(sample, pfit, name)
            else:
                if om == "union":
                    mhat = cache.mhat("linear", pfit.active_set)
                    desc = {"kind": "linear", "subset": list(pfit.active_set)}
                elif om == "benkeser":
                    kind = "flexible" if options.benkeser_outcome == "flexible" else "linear"
                    mhat = cache.mhat(kind)
                    desc = {"kind": kind}
                elif om == "flexible":
                    mhat = cache.mhat("flexible")
                    desc = {"kind": "flexible"}
                else:
                    mhat = cache.mhat("linear")
                    desc = {"kind": options.outcome_family, "subset": options.outcome_subset}
                if options.mhat_zero:
                    desc = {"kind": "zero"}
                rep = estimate_aipw(sample, pfit, mhat, name, metadata={"outcome": desc})
            out[name] = rep
        except Exception as exc:  # recorded per method; callers decide
            out[name] = exc
    return out


def selection_of(report: EstimateReport) -> tuple[int, ...] | None:
    """Selected covariates of a penalised propensity fit, else None."""
    meta = report.metadata.get("propensity", {})
    if meta.get("method") in ("lasso", "oalasso", "scad_union", "newton"):
        return tuple(meta.get("active_set", ()))
    return None
